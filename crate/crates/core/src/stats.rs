//! Population moments shared by label standardization and latent statistics.

/// Mean and population standard deviation (no Bessel correction).
/// Returns `None` for an empty slice.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Column-wise [`mean_std`] over equally long rows.
pub fn column_mean_std(rows: &[Vec<f64>]) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = rows.first()?.len();
    let mut mu = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    let mut col = Vec::with_capacity(rows.len());
    for j in 0..d {
        col.clear();
        col.extend(rows.iter().map(|r| r[j]));
        let (m, s) = mean_std(&col)?;
        mu.push(m);
        sigma.push(s);
    }
    Some((mu, sigma))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Welford's single-pass recurrence.
    fn welford(xs: &[f64]) -> (f64, f64) {
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &x) in xs.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        (mean, (m2 / xs.len() as f64).sqrt())
    }

    #[test]
    fn hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).is_none());
    }

    #[test]
    fn agrees_with_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..20).map(|_| rng.random_range(50.0..70.0)).collect();
            let (m, s) = mean_std(&xs).unwrap();
            let (wm, ws) = welford(&xs);
            assert!((m - wm).abs() < 1e-12 && (s - ws).abs() < 1e-12);
        }
    }

    #[test]
    fn columns() {
        let (mu, sigma) = column_mean_std(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(mu, vec![2.0, 4.0]);
        assert_eq!(sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
