use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{batch, GraphInput};
use super::{check_tag, graph_input, BackboneActivations, Mode, Predictor, PredictorError};
use crate::graph::ComputeGraph;
use crate::numeric::{Adam, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainHyper {
    pub fn backbone() -> Self {
        TrainHyper { epochs: 40, lr: 1e-4, batch_size: 32, seed: 0 }
    }

    pub fn adapter() -> Self {
        TrainHyper { epochs: 100, lr: 1e-4, batch_size: 32, seed: 0 }
    }

    pub fn finetune() -> Self {
        TrainHyper { epochs: 100, lr: 1e-4, batch_size: 1, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaProxyHyper {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for AdaProxyHyper {
    fn default() -> Self {
        AdaProxyHyper { epochs: 1000, lr: 1e-3, lambda: 1e-5 }
    }
}

fn check_data(graphs: &[ComputeGraph], targets: &[f64]) -> Result<Vec<GraphInput>, PredictorError> {
    if graphs.len() != targets.len() {
        return Err(PredictorError::LengthMismatch { graphs: graphs.len(), targets: targets.len() });
    }
    if graphs.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let inputs = graphs.iter().map(graph_input).collect::<Result<Vec<_>, _>>()?;
    if inputs.iter().any(|g| g.nodes() == 0) {
        return Err(PredictorError::EmptyGraph);
    }
    Ok(inputs)
}

fn targets_of(targets: &[f64], idx: &[usize]) -> Tensor {
    Tensor::from_vec(idx.len(), 1, idx.iter().map(|&i| targets[i]).collect()).expect("non-empty batch")
}

impl Predictor {
    /// Shuffled minibatch Adam loop; returns the mean training loss of each
    /// epoch. Parameters are left frozen afterwards.
    fn fit(
        &mut self,
        n: usize,
        hyper: &TrainHyper,
        stream: &str,
        mut loss: impl FnMut(&Predictor, &[usize]) -> Result<(Tape, Var), PredictorError>,
    ) -> Result<Vec<f64>, PredictorError> {
        self.store.reset_optimizer();
        let opt = Adam::new(hyper.lr);
        let mut rng = crate::seeds::rng(hyper.seed, stream);
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::with_capacity(hyper.epochs);
        for _ in 0..hyper.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(hyper.batch_size.max(1)) {
                let (tape, l) = loss(self, chunk)?;
                total += tape.value(l).item() * chunk.len() as f64;
                let g = tape.backward(l)?;
                self.store.apply(&g, &opt)?;
            }
            curve.push(total / n as f64);
        }
        self.store.freeze_all();
        Ok(curve)
    }

    /// Mean squared error of `mode` predictions and its gradient with
    /// respect to every currently unfrozen parameter.
    pub fn loss_gradients(
        &self,
        graphs: &[ComputeGraph],
        targets: &[f64],
        mode: Mode,
    ) -> Result<(f64, Gradients), PredictorError> {
        let inputs = check_data(graphs, targets)?;
        let mode = self.resolve(mode)?;
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        let b = batch(&refs);
        let mut t = Tape::new();
        let bv = self.backbone_vars(&mut t, &b)?;
        let y = match mode {
            Mode::Backbone => self.head(&mut t, "head.backbone", bv.graph_embedding)?,
            _ => {
                let mut sum: Option<Var> = None;
                for tag in &self.adapters {
                    let y = self.adapter_output(&mut t, tag, &bv, &b)?;
                    sum = Some(match sum {
                        Some(s) => t.add(s, y)?,
                        None => y,
                    });
                }
                t.scale(sum.expect("resolved adapters mode"), 1.0 / self.adapters.len() as f64)
            }
        };
        let idx: Vec<usize> = (0..targets.len()).collect();
        let target = t.constant(targets_of(targets, &idx));
        let l = t.mse(y, target)?;
        let g = t.backward(l)?;
        Ok((t.value(l).item(), g))
    }

    /// Trains embedding, backbone and backbone head on standardized targets.
    pub fn train_backbone(
        &mut self,
        graphs: &[ComputeGraph],
        targets: &[f64],
        hyper: &TrainHyper,
    ) -> Result<Vec<f64>, PredictorError> {
        if !self.adapters.is_empty() || !self.has_backbone_head {
            return Err(PredictorError::BackboneLocked);
        }
        let inputs = check_data(graphs, targets)?;
        self.store.freeze_all();
        for prefix in ["embed.", "backbone.", "head.backbone."] {
            self.store.set_frozen_prefix(prefix, false);
        }
        self.fit(inputs.len(), hyper, "train-backbone", |p, idx| {
            let refs: Vec<&GraphInput> = idx.iter().map(|&i| &inputs[i]).collect();
            let b = batch(&refs);
            let mut t = Tape::new();
            let bv = p.backbone_vars(&mut t, &b)?;
            let y = p.head(&mut t, "head.backbone", bv.graph_embedding)?;
            let target = t.constant(targets_of(targets, idx));
            let l = t.mse(y, target)?;
            Ok((t, l))
        })
    }

    /// Adds adapter `tag` and trains it with every other weight frozen.
    /// The backbone head is discarded when the first adapter is added.
    pub fn train_adapter(
        &mut self,
        tag: &str,
        graphs: &[ComputeGraph],
        targets: &[f64],
        hyper: &TrainHyper,
    ) -> Result<Vec<f64>, PredictorError> {
        check_tag(tag)?;
        if self.adapters.contains(tag) {
            return Err(PredictorError::DuplicateAdapter(tag.to_string()));
        }
        let inputs = check_data(graphs, targets)?;
        let mut acts: Vec<BackboneActivations> = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let refs: Vec<&GraphInput> = chunk.iter().collect();
            acts.extend(self.activations(&refs)?);
        }
        if self.has_backbone_head {
            self.store.remove_prefix("head.backbone.");
            self.has_backbone_head = false;
        }
        self.store.freeze_all();
        self.init_adapter(tag, hyper.seed);
        self.fit(inputs.len(), hyper, &format!("train-adapter/{tag}"), |p, idx| {
            let refs: Vec<&GraphInput> = idx.iter().map(|&i| &inputs[i]).collect();
            let arefs: Vec<&BackboneActivations> = idx.iter().map(|&i| &acts[i]).collect();
            let b = batch(&refs);
            let mut t = Tape::new();
            let bv = Predictor::backbone_consts(&mut t, &arefs);
            let y = p.adapter_output(&mut t, tag, &bv, &b)?;
            let target = t.constant(targets_of(targets, idx));
            let l = t.mse(y, target)?;
            Ok((t, l))
        })
    }

    /// Fine-tunes embedding, backbone and all heads on a few target-task
    /// samples; adapter GNN layers stay frozen.
    pub fn finetune(
        &mut self,
        graphs: &[ComputeGraph],
        targets: &[f64],
        hyper: &TrainHyper,
    ) -> Result<Vec<f64>, PredictorError> {
        if self.adapters.is_empty() {
            return Err(PredictorError::NoAdapters);
        }
        let inputs = check_data(graphs, targets)?;
        self.store.freeze_all();
        for prefix in ["embed.", "backbone.", "head."] {
            self.store.set_frozen_prefix(prefix, false);
        }
        let k = self.adapters.len() as f64;
        self.fit(inputs.len(), hyper, "finetune", |p, idx| {
            let refs: Vec<&GraphInput> = idx.iter().map(|&i| &inputs[i]).collect();
            let b = batch(&refs);
            let mut t = Tape::new();
            let bv = p.backbone_vars(&mut t, &b)?;
            let mut sum: Option<Var> = None;
            for tag in &p.adapters {
                let y = p.adapter_output(&mut t, tag, &bv, &b)?;
                sum = Some(match sum {
                    Some(s) => t.add(s, y)?,
                    None => y,
                });
            }
            let mean = t.scale(sum.expect("at least one adapter"), 1.0 / k);
            let target = t.constant(targets_of(targets, idx));
            let l = t.mse(mean, target)?;
            Ok((t, l))
        })
    }

    /// Learns a scalar `alpha` and a sparse vector `b` that rescale the final
    /// layer weights `w` of every head to `(alpha + b) * w`, with all other
    /// weights frozen. Minimizes mean squared error plus `lambda * |b|_1`.
    pub fn adaproxy_finetune(
        &mut self,
        graphs: &[ComputeGraph],
        targets: &[f64],
        hyper: &AdaProxyHyper,
    ) -> Result<Vec<f64>, PredictorError> {
        let inputs = check_data(graphs, targets)?;
        let mode = self.resolve(Mode::Auto)?;
        let prefixes: Vec<String> = match mode {
            Mode::Backbone => vec!["head.backbone".to_string()],
            _ => self.adapters.iter().map(|t| format!("head.adapter.{t}")).collect(),
        };
        // Everything below the gated layer is frozen, so its inputs are cached.
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        let b = batch(&refs);
        let mut cache = Vec::new();
        {
            let mut t = Tape::new();
            let bv = self.backbone_vars(&mut t, &b)?;
            for prefix in &prefixes {
                let g = match mode {
                    Mode::Backbone => bv.graph_embedding,
                    _ => {
                        let tag = &prefix["head.adapter.".len()..];
                        let gk = self.adapter_embedding(&mut t, tag, &bv, &b)?;
                        t.concat(bv.graph_embedding, gk)?
                    }
                };
                let x = self.head_hidden(&mut t, prefix, g)?;
                cache.push(t.value(x).clone());
            }
        }
        self.store.freeze_all();
        if !self.has_adaproxy() {
            self.store.insert("adaproxy.alpha", Tensor::scalar(1.0));
            self.store.insert("adaproxy.b", Tensor::zeros(self.config.mlp_hidden, 1));
        }
        self.store.set_frozen_prefix("adaproxy.", false);
        self.store.reset_optimizer();
        let opt = Adam::new(hyper.lr);
        let target = Tensor::from_vec(targets.len(), 1, targets.to_vec()).expect("non-empty");
        let k = prefixes.len() as f64;
        let mut curve = Vec::with_capacity(hyper.epochs);
        for _ in 0..hyper.epochs {
            let mut t = Tape::new();
            let mut sum: Option<Var> = None;
            for (prefix, x) in prefixes.iter().zip(&cache) {
                let xv = t.constant(x.clone());
                let y = self.head_out(&mut t, prefix, xv)?;
                sum = Some(match sum {
                    Some(s) => t.add(s, y)?,
                    None => y,
                });
            }
            let mean = t.scale(sum.expect("at least one head"), 1.0 / k);
            let tv = t.constant(target.clone());
            let mse = t.mse(mean, tv)?;
            let bv = t.param(&self.store, "adaproxy.b")?;
            let l1 = t.abs(bv);
            let l1 = t.sum(l1);
            let l1 = t.scale(l1, hyper.lambda);
            let l = t.add(mse, l1)?;
            curve.push(t.value(l).item());
            let g = t.backward(l)?;
            self.store.apply(&g, &opt)?;
        }
        self.store.freeze_all();
        Ok(curve)
    }
}
