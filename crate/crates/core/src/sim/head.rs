use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::body::{sample_latent, BodyPool, SyntheticBody};
use super::{SimError, SyntheticTask};
use crate::graph::{gen_space, SpaceSpec};
use crate::numeric::{Adam, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    LatentSampling,
    BodySwapping,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadHyper {
    /// Number of minibatches.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub train_images: usize,
    /// Bodies per length bin for latent sampling.
    pub per_bin: usize,
    /// Minibatches between body swaps.
    pub swap_every: usize,
    pub seed: u64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper {
            steps: 400,
            batch_size: 32,
            lr: 3e-2,
            hidden: 16,
            train_images: 512,
            per_bin: 5,
            swap_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub seed: u64,
}

impl Default for PseudoHyper {
    fn default() -> Self {
        PseudoHyper { epochs: 10, lr: 1e-2, batch_size: 16, train_images: 64, eval_images: 256, seed: 0 }
    }
}

/// Two-layer MLP mapping latents to the per-image target.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedHead {
    pub store: ParamStore,
    latent_dim: usize,
}

impl SharedHead {
    pub fn new(latent_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = crate::seeds::rng(seed, "shared-head-init");
        let mut store = ParamStore::new();
        store.insert_glorot("head.w1", latent_dim, hidden, &mut rng);
        store.insert("head.b1", Tensor::zeros(1, hidden));
        store.insert_glorot("head.w2", hidden, 1, &mut rng);
        store.insert("head.b2", Tensor::zeros(1, 1));
        SharedHead { store, latent_dim }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn forward(&self, t: &mut Tape, z: Tensor) -> Result<Var, SimError> {
        let z = t.constant(z);
        let w1 = t.param(&self.store, "head.w1")?;
        let b1 = t.param(&self.store, "head.b1")?;
        let w2 = t.param(&self.store, "head.w2")?;
        let b2 = t.param(&self.store, "head.b2")?;
        let h = t.matmul(z, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.relu(h);
        let y = t.matmul(h, w2)?;
        Ok(t.add_row(y, b2)?)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<f64>, SimError> {
        if z.cols() != self.latent_dim {
            return Err(SimError::LatentMismatch { head: self.latent_dim, body: z.cols() });
        }
        let mut t = Tape::new();
        let y = self.forward(&mut t, z.clone())?;
        Ok(t.value(y).data().to_vec())
    }

    /// One Adam step on `(z, y)`; returns the batch loss.
    fn step(&mut self, z: Tensor, y: &[f64], opt: &Adam) -> Result<f64, SimError> {
        let mut t = Tape::new();
        let pred = self.forward(&mut t, z)?;
        let target = t.constant(Tensor::from_vec(y.len(), 1, y.to_vec())?);
        let l = t.mse(pred, target)?;
        let g = t.backward(l)?;
        self.store.apply(&g, opt)?;
        Ok(t.value(l).item())
    }

    /// Mean squared error of the head on a body's latents.
    pub fn loss(&self, z: &Tensor, y: &[f64]) -> Result<f64, SimError> {
        let p = self.predict(z)?;
        Ok(p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len().max(1) as f64)
    }
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::from_vec(idx.len(), x.cols(), data).expect("non-empty batch")
}

fn check_hyper(h: &HeadHyper) -> Result<(), SimError> {
    if h.batch_size == 0 || h.train_images == 0 || h.per_bin == 0 || h.swap_every == 0 || h.hidden == 0 {
        return Err(SimError::BadHyper("batch_size, hidden, train_images, per_bin and swap_every must be positive".into()));
    }
    Ok(())
}

/// Trains a shared head for `task` on bodies from `space`.
pub fn train_shared_head(
    task: &SyntheticTask,
    space: &SpaceSpec,
    strategy: Strategy,
    hyper: &HeadHyper,
) -> Result<SharedHead, SimError> {
    check_hyper(hyper)?;
    let mut head = SharedHead::new(task.spec.latent_dim, hyper.hidden, hyper.seed);
    let (x, y) = task.images(hyper.train_images, crate::seeds::derive(hyper.seed, "head-images"));
    let mut rng = crate::seeds::rng(hyper.seed, match strategy {
        Strategy::LatentSampling => "head/latent-sampling",
        Strategy::BodySwapping => "head/body-swapping",
    });
    let opt = Adam::new(hyper.lr);
    let mut order: Vec<usize> = (0..hyper.train_images).collect();
    let mut batches = Vec::new();
    let mut next_batch = |rng: &mut rand_chacha::ChaCha8Rng| {
        if batches.is_empty() {
            order.shuffle(rng);
            batches = order.chunks(hyper.batch_size).rev().map(<[usize]>::to_vec).collect();
        }
        batches.pop().expect("refilled")
    };
    match strategy {
        Strategy::LatentSampling => {
            if hyper.steps == 0 {
                return Ok(head);
            }
            let mut pool = BodyPool::filled(task, space, hyper.per_bin, &mut rng)?;
            for _ in 0..hyper.steps {
                let idx = next_batch(&mut rng);
                let xb = rows(&x, &idx);
                let (mu, sigma) = pool.latent_stats(&xb)?;
                let mut z = Tensor::zeros(idx.len(), task.spec.latent_dim);
                for i in 0..idx.len() {
                    z.row_mut(i).copy_from_slice(&sample_latent(mu.row(i), sigma.row(i), &mut rng));
                }
                let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                head.step(z, &yb, &opt)?;
                pool.update(task, space, &mut rng)?;
            }
        }
        Strategy::BodySwapping => {
            let mut body: Option<SyntheticBody> = None;
            for s in 0..hyper.steps {
                if s % hyper.swap_every == 0 {
                    let g = gen_space(space, rng.random())?;
                    body = Some(SyntheticBody::new(task, g)?);
                }
                let idx = next_batch(&mut rng);
                let z = body.as_ref().expect("set on step 0").latents(&rows(&x, &idx))?;
                let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                head.step(z, &yb, &opt)?;
            }
        }
    }
    head.store.freeze_all();
    Ok(head)
}

/// Attaches `body` to a copy of `head`, fine-tunes briefly and scores it on
/// held-out images: `lo + (hi - lo) * clamp(R^2, 0, 1)`.
pub fn pseudo_label(
    head: &SharedHead,
    body: &SyntheticBody,
    task: &SyntheticTask,
    hyper: &PseudoHyper,
) -> Result<f64, SimError> {
    if body.latent_dim() != head.latent_dim() {
        return Err(SimError::LatentMismatch { head: head.latent_dim(), body: body.latent_dim() });
    }
    if hyper.eval_images < 2 || hyper.batch_size == 0 {
        return Err(SimError::BadHyper("eval_images must be at least 2 and batch_size positive".into()));
    }
    let mut h = head.clone();
    if hyper.epochs > 0 && hyper.train_images > 0 {
        let (x, y) = task.images(hyper.train_images, crate::seeds::derive(hyper.seed, "pseudo-train"));
        let z = body.latents(&x)?;
        h.store.set_frozen_prefix("head.", false);
        h.store.reset_optimizer();
        let opt = Adam::new(hyper.lr);
        let mut rng = crate::seeds::rng(hyper.seed, "pseudo-order");
        let mut order: Vec<usize> = (0..hyper.train_images).collect();
        for _ in 0..hyper.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch_size) {
                let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
                h.step(rows(&z, chunk), &yb, &opt)?;
            }
        }
        h.store.freeze_all();
    }
    let (xe, ye) = task.images(hyper.eval_images, crate::seeds::derive(hyper.seed, "pseudo-eval"));
    let sse = h.loss(&body.latents(&xe)?, &ye)? * ye.len() as f64;
    let mean = ye.iter().sum::<f64>() / ye.len() as f64;
    let sst: f64 = ye.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    Ok(task.spec.lo + (task.spec.hi - task.spec.lo) * r2.clamp(0.0, 1.0))
}

/// Trains one shared head and pseudo-labels every graph with it.
pub fn label_graphs(
    task: &SyntheticTask,
    space: &SpaceSpec,
    strategy: Strategy,
    head_hyper: &HeadHyper,
    pseudo_hyper: &PseudoHyper,
    graphs: &[crate::graph::ComputeGraph],
) -> Result<Vec<f64>, SimError> {
    let head = train_shared_head(task, space, strategy, head_hyper)?;
    graphs
        .iter()
        .map(|g| pseudo_label(&head, &SyntheticBody::new(task, g.clone())?, task, pseudo_hyper))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskSpec;

    fn setup() -> (SyntheticTask, SpaceSpec) {
        let space = SpaceSpec::preset("mbv3-like").unwrap();
        let gs: Vec<_> = (0..20).map(|s| gen_space(&space, s).unwrap()).collect();
        (SyntheticTask::calibrate(TaskSpec::default(), &gs).unwrap(), space)
    }

    fn small() -> HeadHyper {
        HeadHyper { steps: 60, train_images: 128, per_bin: 2, ..HeadHyper::default() }
    }

    #[test]
    fn zero_steps_returns_initial_head() {
        let (task, space) = setup();
        let hyper = HeadHyper { steps: 0, ..small() };
        for s in [Strategy::LatentSampling, Strategy::BodySwapping] {
            let h = train_shared_head(&task, &space, s, &hyper).unwrap();
            let init = SharedHead::new(task.spec.latent_dim, hyper.hidden, hyper.seed);
            for (name, p) in init.store.iter() {
                assert_eq!(h.store.get(name).unwrap().value, p.value);
            }
        }
    }

    #[test]
    fn training_beats_untrained_head_on_held_out_images() {
        let (task, space) = setup();
        let trained = train_shared_head(&task, &space, Strategy::LatentSampling, &small()).unwrap();
        let untrained = SharedHead::new(task.spec.latent_dim, 16, 0);
        let (x, y) = task.images(200, 999);
        let body = SyntheticBody::new(&task, gen_space(&space, 77).unwrap()).unwrap();
        let z = body.latents(&x).unwrap();
        assert!(trained.loss(&z, &y).unwrap() < untrained.loss(&z, &y).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (task, space) = setup();
        for s in [Strategy::LatentSampling, Strategy::BodySwapping] {
            let a = train_shared_head(&task, &space, s, &small()).unwrap();
            let b = train_shared_head(&task, &space, s, &small()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_budget_is_direct_evaluation() {
        let (task, space) = setup();
        let head = train_shared_head(&task, &space, Strategy::LatentSampling, &small()).unwrap();
        let body = SyntheticBody::new(&task, gen_space(&space, 3).unwrap()).unwrap();
        let hyper = PseudoHyper { epochs: 0, ..PseudoHyper::default() };
        let (xe, ye) = task.images(hyper.eval_images, crate::seeds::derive(hyper.seed, "pseudo-eval"));
        let pred = head.predict(&body.latents(&xe).unwrap()).unwrap();
        let mean = ye.iter().sum::<f64>() / ye.len() as f64;
        let sse: f64 = pred.iter().zip(&ye).map(|(p, v)| (p - v).powi(2)).sum();
        let sst: f64 = ye.iter().map(|v| (v - mean).powi(2)).sum();
        let expect = 55.0 + 12.0 * (1.0 - sse / sst).clamp(0.0, 1.0);
        assert!((pseudo_label(&head, &body, &task, &hyper).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn latent_dim_mismatch_is_an_error() {
        let (task, space) = setup();
        let head = SharedHead::new(task.spec.latent_dim + 1, 8, 0);
        let body = SyntheticBody::new(&task, gen_space(&space, 3).unwrap()).unwrap();
        assert!(matches!(
            pseudo_label(&head, &body, &task, &PseudoHyper::default()),
            Err(SimError::LatentMismatch { .. })
        ));
    }
}
