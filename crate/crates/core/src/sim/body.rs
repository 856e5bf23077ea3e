use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{SimError, SyntheticTask};
use crate::graph::{gen_space, graph_hash, length_bins, ComputeGraph, SpaceSpec};
use crate::numeric::Tensor;
use crate::stats::mean_std;

/// A house sampled from a space together with its body map
/// `f_B(x) = (W0 + eps_B * R_B) x`. `R_B` is seeded by the graph hash and
/// `eps_B` shrinks as the oracle quality of the graph grows. The latents are
/// then mixed by `I + delta_B * A` with a standard-normal style `delta_B`, also
/// seeded by the hash, that carries no quality signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBody {
    pub graph: ComputeGraph,
    pub map: Tensor,
    pub perturbation: f64,
}

impl SyntheticBody {
    pub fn new(task: &SyntheticTask, graph: ComputeGraph) -> Result<Self, SimError> {
        let q = task.quality(&graph)?;
        let s = &task.spec;
        let eps = s.body_noise_min + (s.body_noise_max - s.body_noise_min) * (1.0 - q);
        let (l, d) = task.base_map.shape();
        let mut rng = crate::seeds::rng(graph_hash(&graph), "body");
        let scale = 1.0 / (d as f64).sqrt();
        let mut map = task.base_map.clone();
        for w in map.data_mut() {
            let r: f64 = StandardNormal.sample(&mut rng);
            *w += eps * scale * r;
        }
        let style: f64 = StandardNormal.sample(&mut rng);
        let drift = s.style_drift * style;
        let mut mix = task.drift_map.clone();
        mix.scale_in_place(drift);
        for i in 0..l {
            mix.set(i, i, mix.get(i, i) + 1.0);
        }
        let map = mix.matmul(&map);
        Ok(SyntheticBody { graph, map, perturbation: eps })
    }

    pub fn latent_dim(&self) -> usize {
        self.map.rows()
    }

    /// Latents of a batch of images, one row each.
    pub fn latents(&self, images: &Tensor) -> Result<Tensor, SimError> {
        if images.cols() != self.map.cols() {
            return Err(SimError::BadHyper(format!(
                "image dim {} does not match body input dim {}",
                images.cols(),
                self.map.cols()
            )));
        }
        Ok(images.matmul_t(&self.map))
    }

    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>, SimError> {
        let xt = Tensor::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.latents(&xt)?.into_data())
    }
}

#[derive(Clone, Debug)]
struct Member {
    age: u64,
    body: SyntheticBody,
}

/// Length-binned pool of `bins.len() * per_bin` bodies with FIFO ages and
/// a round-robin replacement cursor.
#[derive(Clone, Debug)]
pub struct BodyPool {
    bins: Vec<(u32, u32)>,
    per_bin: usize,
    slots: Vec<VecDeque<Member>>,
    cursor: usize,
    next_age: u64,
}

impl BodyPool {
    /// Empty pool over the length bins of `space`.
    pub fn new(space: &SpaceSpec, per_bin: usize) -> Self {
        let bins = length_bins(space.block_count_range);
        let slots = bins.iter().map(|_| VecDeque::new()).collect();
        BodyPool { bins, per_bin, slots, cursor: 0, next_age: 0 }
    }

    /// Pool filled with `per_bin` fresh bodies in every bin.
    pub fn filled(
        task: &SyntheticTask,
        space: &SpaceSpec,
        per_bin: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, SimError> {
        let mut pool = BodyPool::new(space, per_bin);
        for b in 0..pool.bins.len() {
            for _ in 0..per_bin {
                let body = pool.sample_for_bin(task, space, b, rng)?;
                pool.push(b, body);
            }
        }
        Ok(pool)
    }

    fn sample_for_bin(
        &self,
        task: &SyntheticTask,
        space: &SpaceSpec,
        bin: usize,
        rng: &mut impl Rng,
    ) -> Result<SyntheticBody, SimError> {
        let (lo, hi) = self.bins[bin];
        let g = gen_space(&space.with_block_range(lo, hi)?, rng.random())?;
        SyntheticBody::new(task, g)
    }

    /// Appends `body` to bin `bin` as its youngest member.
    pub fn push(&mut self, bin: usize, body: SyntheticBody) -> u64 {
        let age = self.next_age;
        self.next_age += 1;
        self.slots[bin].push_back(Member { age, body });
        age
    }

    pub fn bins(&self) -> &[(u32, u32)] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.slots.iter().all(|s| s.len() == self.per_bin)
    }

    /// Bin the next update replaces.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Insertion ages of the members of `bin`, oldest first.
    pub fn ages(&self, bin: usize) -> Vec<u64> {
        self.slots[bin].iter().map(|m| m.age).collect()
    }

    pub fn bodies(&self) -> impl Iterator<Item = &SyntheticBody> {
        self.slots.iter().flatten().map(|m| &m.body)
    }

    /// Replaces the oldest body of the cursor bin with a fresh sample whose
    /// block count lies in that bin, then advances the cursor. Returns the
    /// age of the removed body.
    pub fn update(&mut self, task: &SyntheticTask, space: &SpaceSpec, rng: &mut impl Rng) -> Result<u64, SimError> {
        if !self.is_full() || self.is_empty() {
            return Err(SimError::EmptyPool);
        }
        let b = self.cursor;
        let body = self.sample_for_bin(task, space, b, rng)?;
        let old = self.slots[b].pop_front().expect("full bin").age;
        self.push(b, body);
        self.cursor = (self.cursor + 1) % self.bins.len();
        Ok(old)
    }

    /// Element-wise mean and population standard deviation of the latents of
    /// every body in the pool, per image row.
    pub fn latent_stats(&self, images: &Tensor) -> Result<(Tensor, Tensor), SimError> {
        let latents = self.bodies().map(|b| b.latents(images)).collect::<Result<Vec<_>, _>>()?;
        stats_over(&latents)
    }
}

/// Mean and population standard deviation across equally shaped tensors.
pub(crate) fn stats_over(latents: &[Tensor]) -> Result<(Tensor, Tensor), SimError> {
    let first = latents.first().ok_or(SimError::EmptyPool)?;
    let (r, c) = first.shape();
    let mut mu = Tensor::zeros(r, c);
    let mut sigma = Tensor::zeros(r, c);
    let mut column = Vec::with_capacity(latents.len());
    for i in 0..r {
        for j in 0..c {
            column.clear();
            column.extend(latents.iter().map(|t| t.get(i, j)));
            let (m, s) = mean_std(&column).expect("non-empty");
            mu.set(i, j, m);
            sigma.set(i, j, s);
        }
    }
    Ok((mu, sigma))
}

/// Single-image statistics over `pool`.
pub fn latent_stats(pool: &BodyPool, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let xt = Tensor::from_vec(1, x.len(), x.to_vec())?;
    let (mu, sigma) = pool.latent_stats(&xt)?;
    Ok((mu.into_data(), sigma.into_data()))
}

/// `z = mu + zeta * sigma` with fresh standard-normal `zeta` per element.
pub fn sample_latent(mu: &[f64], sigma: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let zeta: f64 = StandardNormal.sample(rng);
            m + zeta * s
        })
        .collect()
}

/// `update` as a free function over the pool.
pub fn update_pool(
    pool: &mut BodyPool,
    task: &SyntheticTask,
    space: &SpaceSpec,
    rng: &mut impl Rng,
) -> Result<u64, SimError> {
    pool.update(task, space, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SyntheticTask, SpaceSpec) {
        let space = SpaceSpec::preset("mbv3-like").unwrap();
        let gs: Vec<_> = (0..20).map(|s| gen_space(&space, s).unwrap()).collect();
        (SyntheticTask::calibrate(TaskSpec::default(), &gs).unwrap(), space)
    }

    fn fixed_body(task: &SyntheticTask, rows: &[&[f64]]) -> SyntheticBody {
        let g = gen_space(&SpaceSpec::preset("cell-like").unwrap(), 0).unwrap();
        let mut b = SyntheticBody::new(task, g).unwrap();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        b.map = Tensor::from_vec(rows.len(), rows[0].len(), data).unwrap();
        b
    }

    #[test]
    fn two_body_stats_by_hand() {
        let (task, space) = setup();
        let mut pool = BodyPool::new(&space, 1);
        // identity-like maps on a 1-d image give latents [1,3] and [3,5]
        pool.push(0, fixed_body(&task, &[&[1.0], &[3.0]]));
        pool.push(1, fixed_body(&task, &[&[3.0], &[5.0]]));
        let (mu, sigma) = latent_stats(&pool, &[1.0]).unwrap();
        assert_eq!(mu, vec![2.0, 4.0]);
        assert_eq!(sigma, vec![1.0, 1.0]);

        let mut same = BodyPool::new(&space, 1);
        same.push(0, fixed_body(&task, &[&[2.0], &[7.0]]));
        same.push(3, fixed_body(&task, &[&[2.0], &[7.0]]));
        assert_eq!(latent_stats(&same, &[0.5]).unwrap().1, vec![0.0, 0.0]);
    }

    #[test]
    fn stats_match_brute_force() {
        let (task, space) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = BodyPool::filled(&task, &space, 5, &mut rng).unwrap();
        assert_eq!(pool.len(), 25);
        let (x, _) = task.images(3, 9);
        let (mu, sigma) = pool.latent_stats(&x).unwrap();
        let lat: Vec<Tensor> = pool.bodies().map(|b| b.latents(&x).unwrap()).collect();
        let n = lat.len() as f64;
        for i in 0..3 {
            for j in 0..task.spec.latent_dim {
                let m = lat.iter().map(|t| t.get(i, j)).sum::<f64>() / n;
                let v = lat.iter().map(|t| (t.get(i, j) - m).powi(2)).sum::<f64>() / n;
                assert!((mu.get(i, j) - m).abs() < 1e-12);
                assert!((sigma.get(i, j) - v.sqrt()).abs() < 1e-12);
            }
        }
        assert!(matches!(BodyPool::new(&space, 5).latent_stats(&x), Err(SimError::EmptyPool)));
    }

    #[test]
    fn pool_members_sit_in_their_bins() {
        let (task, _) = setup();
        let space = SpaceSpec::preset("pn-like").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = BodyPool::filled(&task, &space, 2, &mut rng).unwrap();
        for (b, &(lo, hi)) in pool.bins().iter().enumerate() {
            for m in &pool.slots[b] {
                assert!((lo..=hi).contains(&m.body.graph.meta.block_count));
            }
        }
    }

    #[test]
    fn round_robin_replaces_oldest() {
        let (task, space) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pool = BodyPool::filled(&task, &space, 5, &mut rng).unwrap();
        let original: Vec<u64> = (0..5).flat_map(|b| pool.ages(b)).collect();
        for round in 0..10 {
            for b in 0..5 {
                assert_eq!(pool.cursor(), b);
                let oldest = pool.ages(b)[0];
                let before: Vec<Vec<u64>> = (0..5).map(|k| pool.ages(k)).collect();
                assert_eq!(update_pool(&mut pool, &task, &space, &mut rng).unwrap(), oldest);
                for (k, ages) in before.iter().enumerate() {
                    if k != b {
                        assert_eq!(&pool.ages(k), ages, "round {round}");
                    }
                }
            }
        }
        let now: Vec<u64> = (0..5).flat_map(|b| pool.ages(b)).collect();
        assert!(now.iter().all(|a| !original.contains(a)));
        assert_eq!(pool.len(), 25);
    }

    #[test]
    fn sampling_is_centered_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(sample_latent(&[1.5, -2.0], &[0.0, 0.0], &mut rng), vec![1.5, -2.0]);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_latent(&[0.0], &[1.0], &mut rng)[0]).collect();
        let (m, s) = mean_std(&draws).unwrap();
        assert!(m.abs() < 0.05 && (s - 1.0).abs() < 0.05, "{m} {s}");
        let a = sample_latent(&[0.0; 4], &[1.0; 4], &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_latent(&[0.0; 4], &[1.0; 4], &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn body_is_a_function_of_the_graph() {
        let (task, space) = setup();
        let g = gen_space(&space, 7).unwrap();
        let a = SyntheticBody::new(&task, g.clone()).unwrap();
        let b = SyntheticBody::new(&task, g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.latent_dim(), task.spec.latent_dim);
        let other = SyntheticBody::new(&task, gen_space(&space, 8).unwrap()).unwrap();
        assert_ne!(a.map, other.map);
    }
}
