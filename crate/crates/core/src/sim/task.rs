use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::graph::{flops, gen_space, graph_hash, ComputeGraph, OpKind, SpaceSpec};
use crate::numeric::Tensor;
use crate::stats::mean_std;

/// Oracle definition of a synthetic downstream task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub tag: String,
    /// Space whose samples calibrate the oracle.
    pub space: String,
    pub calibration_samples: usize,
    /// Metric range in percent.
    pub lo: f64,
    pub hi: f64,
    /// Standard deviation of measurement noise, in metric points.
    pub noise: f64,
    /// Weight of the cross-task shared factor in [0, 1].
    pub correlation: f64,
    /// Weight of standardized log-FLOPs in the score.
    pub flops_weight: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub image_dim: usize,
    /// Body perturbation scale for the best and worst bodies.
    pub body_noise_min: f64,
    pub body_noise_max: f64,
    /// Scale of a per-body mixing of latent coordinates that carries no
    /// quality signal.
    pub style_drift: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            tag: "task".into(),
            space: "mbv3-like".into(),
            calibration_samples: 64,
            lo: 55.0,
            hi: 67.0,
            noise: 0.3,
            correlation: 0.7,
            flops_weight: 1.0,
            seed: 0,
            latent_dim: 6,
            image_dim: 48,
            body_noise_min: 0.1,
            body_noise_max: 1.0,
            style_drift: 1.0,
        }
    }
}

const N_FEATURES: usize = 3 + OpKind::COUNT;
const FLOPS_FEATURE: usize = 2;

/// `[block count, ln mean channels, log10 GFLOPs, op-kind fractions...]`
pub fn graph_features(cg: &ComputeGraph) -> Result<Vec<f64>, SimError> {
    let g = flops(cg)?;
    let n = cg.nodes.len().max(1) as f64;
    let mean_c = cg.nodes.iter().map(|v| v.out_shape.c as f64).sum::<f64>() / n;
    let mut f = vec![cg.meta.block_count as f64, mean_c.ln(), g.max(1e-9).log10()];
    let mut hist = [0.0; OpKind::COUNT];
    for v in &cg.nodes {
        hist[v.op.index()] += 1.0 / n;
    }
    f.extend_from_slice(&hist);
    Ok(f)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// A calibrated task: oracle metric for graphs plus the image-level
/// regression problem its shared head solves.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    weights: Vec<f64>,
    score_scale: f64,
    /// Mean body map, latent x image.
    pub(crate) base_map: Tensor,
    /// Image-space direction defining per-image targets.
    pub(crate) target_dir: Vec<f64>,
    pub(crate) drift_map: Tensor,
}

impl SyntheticTask {
    /// Standardizes features over `reference` graphs and fixes the score scale.
    pub fn calibrate(spec: TaskSpec, reference: &[ComputeGraph]) -> Result<Self, SimError> {
        if !(spec.lo < spec.hi) || spec.noise < 0.0 || !(0.0..=1.0).contains(&spec.correlation) {
            return Err(SimError::BadTask(format!(
                "`{}`: need lo < hi, noise >= 0, correlation in [0, 1]",
                spec.tag
            )));
        }
        if spec.latent_dim == 0 || spec.image_dim < spec.latent_dim {
            return Err(SimError::BadTask(format!("`{}`: need 0 < latent_dim <= image_dim", spec.tag)));
        }
        if reference.len() < 2 {
            return Err(SimError::BadTask(format!("`{}`: calibration needs at least 2 graphs", spec.tag)));
        }
        let feats = reference.iter().map(graph_features).collect::<Result<Vec<_>, _>>()?;
        let (feat_mean, feat_std) = crate::stats::column_mean_std(&feats).expect("non-empty");

        // shared factor is identical for every task; the own factor follows the task seed
        let mut shared_rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
        let shared = normal_vec(&mut shared_rng, N_FEATURES, 1.0);
        let mut own_rng = crate::seeds::rng(spec.seed, &format!("task/{}", spec.tag));
        let own = normal_vec(&mut own_rng, N_FEATURES, 1.0);
        let rho = spec.correlation;
        let mut weights: Vec<f64> =
            shared.iter().zip(&own).map(|(s, o)| rho * s + (1.0 - rho * rho).sqrt() * o).collect();
        // the residual is normalized so flops_weight sets the FLOPs share
        weights[FLOPS_FEATURE] = 0.0;
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        for w in &mut weights {
            *w /= norm;
        }
        weights[FLOPS_FEATURE] = spec.flops_weight;

        let mut task = SyntheticTask {
            base_map: Tensor::zeros(spec.latent_dim, spec.image_dim),
            drift_map: Tensor::zeros(spec.latent_dim, spec.image_dim),
            target_dir: Vec::new(),
            spec,
            feat_mean,
            feat_std,
            weights,
            score_scale: 1.0,
        };
        let scores: Vec<f64> = feats.iter().map(|f| task.raw_score(f)).collect();
        let (_, s) = mean_std(&scores).expect("non-empty");
        task.score_scale = if s > 0.0 { s } else { 1.0 };

        let mut map_rng = crate::seeds::rng(task.spec.seed, &format!("body-map/{}", task.spec.tag));
        let (l, d) = (task.spec.latent_dim, task.spec.image_dim);
        let scale = 1.0 / (d as f64).sqrt();
        task.base_map = Tensor::from_vec(l, d, normal_vec(&mut map_rng, l * d, scale)).expect("positive dims");
        // targets depend on the image only through the base latent, so they
        // are recoverable exactly by the mean body
        let u = normal_vec(&mut map_rng, l, 1.0);
        let mut v = vec![0.0; d];
        for (r, ur) in u.iter().enumerate() {
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += ur * task.base_map.get(r, c);
            }
        }
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        task.target_dir = v.into_iter().map(|x| x / vn).collect();
        let lscale = 1.0 / (l as f64).sqrt();
        task.drift_map = Tensor::from_vec(l, l, normal_vec(&mut map_rng, l * l, lscale)).expect("positive dims");
        Ok(task)
    }

    /// Calibrates on `spec.calibration_samples` graphs drawn from `space`.
    pub fn from_space(spec: TaskSpec, space: &SpaceSpec) -> Result<Self, SimError> {
        let refs = (0..spec.calibration_samples)
            .map(|i| gen_space(space, crate::seeds::derive(spec.seed, &format!("calibration/{}/{i}", spec.tag))))
            .collect::<Result<Vec<_>, _>>()?;
        SyntheticTask::calibrate(spec, &refs)
    }

    pub fn tag(&self) -> &str {
        &self.spec.tag
    }

    fn raw_score(&self, f: &[f64]) -> f64 {
        f.iter()
            .enumerate()
            .map(|(j, x)| if self.feat_std[j] > 0.0 { self.weights[j] * (x - self.feat_mean[j]) / self.feat_std[j] } else { 0.0 })
            .sum()
    }

    /// Noise-free oracle metric.
    pub fn expected(&self, cg: &ComputeGraph) -> Result<f64, SimError> {
        let s = self.raw_score(&graph_features(cg)?) / self.score_scale;
        let logistic = 1.0 / (1.0 + (-1.5 * s).exp());
        Ok(self.spec.lo + (self.spec.hi - self.spec.lo) * logistic)
    }

    /// Oracle metric plus measurement noise fixed by the graph and task.
    pub fn measure(&self, cg: &ComputeGraph) -> Result<f64, SimError> {
        let e = self.expected(cg)?;
        let mut rng = crate::seeds::rng(self.spec.seed ^ graph_hash(cg), &format!("measure/{}", self.spec.tag));
        let z: f64 = StandardNormal.sample(&mut rng);
        Ok((e + self.spec.noise * z).clamp(self.spec.lo, self.spec.hi))
    }

    /// Normalized oracle quality in (0, 1).
    pub fn quality(&self, cg: &ComputeGraph) -> Result<f64, SimError> {
        Ok((self.expected(cg)? - self.spec.lo) / (self.spec.hi - self.spec.lo))
    }

    /// `n` images with unit-variance targets.
    pub fn images(&self, n: usize, seed: u64) -> (Tensor, Vec<f64>) {
        let mut rng = crate::seeds::rng(seed, &format!("images/{}", self.spec.tag));
        let d = self.spec.image_dim;
        let x = normal_vec(&mut rng, n * d, 1.0);
        let y = x.chunks(d).map(|row| row.iter().zip(&self.target_dir).map(|(a, b)| a * b).sum()).collect();
        (Tensor::from_vec(n.max(1), d, if n == 0 { vec![0.0; d] } else { x }).expect("dims"), y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graphs(space: &str, n: u64) -> Vec<ComputeGraph> {
        let spec = SpaceSpec::preset(space).unwrap();
        (0..n).map(|s| gen_space(&spec, s).unwrap()).collect()
    }

    #[test]
    fn oracle_is_deterministic_and_in_range() {
        let gs = graphs("mbv3-like", 40);
        let t = SyntheticTask::calibrate(TaskSpec { seed: 3, ..TaskSpec::default() }, &gs).unwrap();
        let again = SyntheticTask::calibrate(TaskSpec { seed: 3, ..TaskSpec::default() }, &gs).unwrap();
        for g in &gs {
            let m = t.measure(g).unwrap();
            assert!((55.0..=67.0).contains(&m));
            assert_eq!(m, again.measure(g).unwrap());
        }
    }

    #[test]
    fn flops_dominated_task_tracks_flops() {
        let gs = graphs("r50-like", 40);
        let spec = TaskSpec { flops_weight: 5.0, noise: 0.0, ..TaskSpec::default() };
        let t = SyntheticTask::calibrate(spec, &gs).unwrap();
        let m: Vec<f64> = gs.iter().map(|g| t.measure(g).unwrap()).collect();
        let f: Vec<f64> = gs.iter().map(|g| flops(g).unwrap()).collect();
        assert!(crate::eval::srcc(&m, &f).unwrap() > 0.8);
    }

    #[test]
    fn correlation_knob_links_tasks() {
        let gs = graphs("mbv3-like", 60);
        let metric = |seed, correlation| {
            let spec = TaskSpec { seed, correlation, flops_weight: 0.0, noise: 0.0, ..TaskSpec::default() };
            let t = SyntheticTask::calibrate(spec, &gs).unwrap();
            gs.iter().map(|g| t.expected(g).unwrap()).collect::<Vec<_>>()
        };
        let high = crate::eval::srcc(&metric(1, 1.0), &metric(2, 1.0)).unwrap();
        assert!((high - 1.0).abs() < 1e-12);
        let low = crate::eval::srcc(&metric(1, 0.0), &metric(2, 0.0)).unwrap();
        assert!(low < 0.9);
    }

    #[test]
    fn rejects_bad_spec() {
        let gs = graphs("cell-like", 4);
        let bad = TaskSpec { lo: 70.0, ..TaskSpec::default() };
        assert!(SyntheticTask::calibrate(bad, &gs).is_err());
        assert!(SyntheticTask::calibrate(TaskSpec::default(), &gs[..1]).is_err());
    }
}
