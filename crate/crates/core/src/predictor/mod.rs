//! GNN performance predictor with a shared backbone and task adapters.
//!
//! Parameter layout in the store:
//!
//! | prefix                     | contents                                   |
//! |----------------------------|--------------------------------------------|
//! | `embed.`                   | node-feature affine map, 31 -> 32          |
//! | `backbone.{i}.`            | GNN layer i: `self`, `nbr`, `b`            |
//! | `head.backbone.`           | backbone MLP head (removed by adapters)    |
//! | `adapter.{tag}.{i}.`       | adapter GNN layer i, 64 -> 32              |
//! | `head.adapter.{tag}.`      | adapter MLP head, 64 -> 1                  |
//! | `adaproxy.`                | `alpha` (1x1) and `b` (hidden x 1)         |

mod features;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use features::{graph_input, neighbor_lists, node_features, GraphInput, FEATURE_DIM};
pub use train::{AdaProxyHyper, TrainHyper};

use crate::error::{CheckpointError, GraphError, NumericError};
use crate::graph::ComputeGraph;
use crate::numeric::{checkpoint, Neighbors, ParamStore, Tape, Tensor, Var};
use crate::scaling::ScalingSpec;
use features::{batch, Batch};

#[derive(Debug, thiserror::Error)]
pub enum PredictorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid predictor config: {0}")]
    Config(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{graphs} graphs but {targets} targets")]
    LengthMismatch { graphs: usize, targets: usize },
    #[error("predictor has no adapters")]
    NoAdapters,
    #[error("backbone head was discarded when adapters were added")]
    NoBackboneHead,
    #[error("adapter `{0}` already exists")]
    DuplicateAdapter(String),
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("invalid adapter tag `{0}` (use letters, digits, '-' or '_')")]
    BadTag(String),
    #[error("backbone cannot be retrained once adapters exist")]
    BackboneLocked,
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub n_gnn_layers: usize,
    pub mlp_hidden: usize,
    pub mlp_hidden_layers: usize,
    pub adapter_in_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { embed_dim: 32, n_gnn_layers: 6, mlp_hidden: 32, mlp_hidden_layers: 4, adapter_in_dim: 64 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.embed_dim == 0 || self.mlp_hidden == 0 || self.n_gnn_layers == 0 {
            return Err(PredictorError::Config("dimensions and layer count must be positive".into()));
        }
        if self.adapter_in_dim != 2 * self.embed_dim {
            return Err(PredictorError::Config(format!(
                "adapter_in_dim {} must equal 2 * embed_dim {}",
                self.adapter_in_dim, self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Backbone,
    Adapters,
    /// Adapters when any exist, otherwise the backbone head.
    Auto,
}

/// Node embeddings of every backbone layer for one graph: `layers[0]` is
/// the embedding output, `layers[i]` the output of GNN layer i.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneActivations {
    pub layers: Vec<Tensor>,
    pub graph_embedding: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub store: ParamStore,
    adapters: BTreeSet<String>,
    has_backbone_head: bool,
    /// Label scalings keyed by task tag, carried in checkpoints.
    pub scalings: BTreeMap<String, ScalingSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: PredictorConfig,
    adapters: Vec<String>,
    has_backbone_head: bool,
    scalings: BTreeMap<String, ScalingSpec>,
    config_hash: String,
}

const FORMAT: &str = "cgperf-predictor";

/// Tags are non-empty ASCII alphanumerics, `-` and `_`.
pub fn check_tag(tag: &str) -> Result<(), PredictorError> {
    let ok = !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(PredictorError::BadTag(tag.to_string()))
    }
}

pub(crate) struct BackboneVars {
    layers: Vec<Var>,
    graph_embedding: Var,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self, PredictorError> {
        config.validate()?;
        let mut rng = crate::seeds::rng(seed, "predictor-init");
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        store.insert_glorot("embed.w", FEATURE_DIM, e, &mut rng);
        store.insert("embed.b", Tensor::zeros(1, e));
        for i in 0..config.n_gnn_layers {
            store.insert_glorot(&format!("backbone.{i}.self"), e, e, &mut rng);
            store.insert_glorot(&format!("backbone.{i}.nbr"), e, e, &mut rng);
            store.insert(&format!("backbone.{i}.b"), Tensor::zeros(1, e));
        }
        let mut p = Predictor {
            config,
            store,
            adapters: BTreeSet::new(),
            has_backbone_head: true,
            scalings: BTreeMap::new(),
        };
        p.init_head("head.backbone", p.config.embed_dim, &mut rng);
        Ok(p)
    }

    fn init_head(&mut self, prefix: &str, input: usize, rng: &mut impl rand::Rng) {
        let h = self.config.mlp_hidden;
        let mut width = input;
        for j in 0..self.config.mlp_hidden_layers {
            self.store.insert_glorot(&format!("{prefix}.h{j}.w"), width, h, rng);
            self.store.insert(&format!("{prefix}.h{j}.b"), Tensor::zeros(1, h));
            width = h;
        }
        self.store.insert_glorot(&format!("{prefix}.out.w"), width, 1, rng);
        self.store.insert(&format!("{prefix}.out.b"), Tensor::zeros(1, 1));
    }

    pub(crate) fn init_adapter(&mut self, tag: &str, seed: u64) {
        let mut rng = crate::seeds::rng(seed, &format!("adapter-init/{tag}"));
        let (e, a) = (self.config.embed_dim, self.config.adapter_in_dim);
        for i in 0..self.config.n_gnn_layers {
            self.store.insert_glorot(&format!("adapter.{tag}.{i}.self"), a, e, &mut rng);
            self.store.insert_glorot(&format!("adapter.{tag}.{i}.nbr"), a, e, &mut rng);
            self.store.insert(&format!("adapter.{tag}.{i}.b"), Tensor::zeros(1, e));
        }
        self.init_head(&format!("head.adapter.{tag}"), 2 * e, &mut rng);
        self.adapters.insert(tag.to_string());
    }

    pub fn adapters(&self) -> impl Iterator<Item = &str> {
        self.adapters.iter().map(String::as_str)
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    pub fn has_backbone_head(&self) -> bool {
        self.has_backbone_head
    }

    pub fn has_adaproxy(&self) -> bool {
        self.store.contains("adaproxy.alpha")
    }

    fn resolve(&self, mode: Mode) -> Result<Mode, PredictorError> {
        match mode {
            Mode::Auto if self.adapters.is_empty() => self.resolve(Mode::Backbone),
            Mode::Auto => Ok(Mode::Adapters),
            Mode::Adapters if self.adapters.is_empty() => Err(PredictorError::NoAdapters),
            Mode::Backbone if !self.has_backbone_head => Err(PredictorError::NoBackboneHead),
            m => Ok(m),
        }
    }

    // ---- tape-level building blocks ----

    fn gnn_layer(&self, t: &mut Tape, prefix: &str, h: Var, nbr: &Arc<Neighbors>) -> Result<Var, PredictorError> {
        let ws = t.param(&self.store, &format!("{prefix}.self"))?;
        let wn = t.param(&self.store, &format!("{prefix}.nbr"))?;
        let b = t.param(&self.store, &format!("{prefix}.b"))?;
        let own = t.matmul(h, ws)?;
        // sum_u (h_u W) == (sum_u h_u) W; transforming first keeps the
        // propagated width at embed_dim
        let msg = t.matmul(h, wn)?;
        let msg = t.propagate(msg, nbr.clone())?;
        let s = t.add(own, msg)?;
        let s = t.add_row(s, b)?;
        Ok(t.relu(s))
    }

    pub(crate) fn backbone_vars(&self, t: &mut Tape, b: &Batch) -> Result<BackboneVars, PredictorError> {
        let x = t.constant(b.features.clone());
        let we = t.param(&self.store, "embed.w")?;
        let be = t.param(&self.store, "embed.b")?;
        let h0 = t.matmul(x, we)?;
        let mut h = t.add_row(h0, be)?;
        let mut layers = vec![h];
        for i in 0..self.config.n_gnn_layers {
            h = self.gnn_layer(t, &format!("backbone.{i}"), h, &b.neighbors)?;
            layers.push(h);
        }
        let graph_embedding = t.segment_mean(h, b.offsets.clone())?;
        Ok(BackboneVars { layers, graph_embedding })
    }

    pub(crate) fn backbone_consts(t: &mut Tape, acts: &[&BackboneActivations]) -> BackboneVars {
        let depth = acts[0].layers.len();
        let layers = (0..depth)
            .map(|i| {
                let rows: Vec<Tensor> = acts.iter().map(|a| a.layers[i].clone()).collect();
                t.constant(Tensor::stack_rows(&rows))
            })
            .collect();
        let ge: Vec<Tensor> = acts.iter().map(|a| a.graph_embedding.clone()).collect();
        let graph_embedding = t.constant(Tensor::stack_rows(&ge));
        BackboneVars { layers, graph_embedding }
    }

    pub(crate) fn adapter_embedding(
        &self,
        t: &mut Tape,
        tag: &str,
        bv: &BackboneVars,
        b: &Batch,
    ) -> Result<Var, PredictorError> {
        let mut hk = bv.layers[0];
        for i in 0..self.config.n_gnn_layers {
            let input = t.concat(hk, bv.layers[i + 1])?;
            let width = t.value(input).cols();
            if width != self.config.adapter_in_dim {
                return Err(NumericError::Shape {
                    op: "adapter",
                    lhs: (t.value(input).rows(), width),
                    rhs: (0, self.config.adapter_in_dim),
                }
                .into());
            }
            hk = self.gnn_layer(t, &format!("adapter.{tag}.{i}"), input, &b.neighbors)?;
        }
        Ok(t.segment_mean(hk, b.offsets.clone())?)
    }

    pub(crate) fn head(&self, t: &mut Tape, prefix: &str, g: Var) -> Result<Var, PredictorError> {
        let x = self.head_hidden(t, prefix, g)?;
        self.head_out(t, prefix, x)
    }

    /// Hidden MLP stack of a head, up to its final linear layer.
    pub(crate) fn head_hidden(&self, t: &mut Tape, prefix: &str, mut g: Var) -> Result<Var, PredictorError> {
        for j in 0..self.config.mlp_hidden_layers {
            let w = t.param(&self.store, &format!("{prefix}.h{j}.w"))?;
            let b = t.param(&self.store, &format!("{prefix}.h{j}.b"))?;
            let z = t.matmul(g, w)?;
            let z = t.add_row(z, b)?;
            g = t.relu(z);
        }
        Ok(g)
    }

    /// Final linear layer, gated by `(alpha + b)` when AdaProxy is attached.
    pub(crate) fn head_out(&self, t: &mut Tape, prefix: &str, g: Var) -> Result<Var, PredictorError> {
        let mut w = t.param(&self.store, &format!("{prefix}.out.w"))?;
        if self.has_adaproxy() {
            let alpha = t.param(&self.store, "adaproxy.alpha")?;
            let sparse = t.param(&self.store, "adaproxy.b")?;
            let gate = t.add_scalar(sparse, alpha)?;
            w = t.mul(gate, w)?;
        }
        let b = t.param(&self.store, &format!("{prefix}.out.b"))?;
        let z = t.matmul(g, w)?;
        Ok(t.add_row(z, b)?)
    }

    /// Output of adapter `tag`'s head on a batch (B x 1).
    pub(crate) fn adapter_output(
        &self,
        t: &mut Tape,
        tag: &str,
        bv: &BackboneVars,
        b: &Batch,
    ) -> Result<Var, PredictorError> {
        let gk = self.adapter_embedding(t, tag, bv, b)?;
        let cat = t.concat(bv.graph_embedding, gk)?;
        self.head(t, &format!("head.adapter.{tag}"), cat)
    }

    // ---- public inference ----

    pub fn embed_nodes(&self, cg: &ComputeGraph) -> Result<Tensor, PredictorError> {
        let input = graph_input(cg)?;
        let mut t = Tape::new();
        let x = t.constant(input.features);
        let we = t.param(&self.store, "embed.w")?;
        let be = t.param(&self.store, "embed.b")?;
        let h = t.matmul(x, we)?;
        let h = t.add_row(h, be)?;
        Ok(t.value(h).clone())
    }

    pub fn forward_backbone(&self, cg: &ComputeGraph) -> Result<BackboneActivations, PredictorError> {
        if cg.nodes.is_empty() {
            return Err(PredictorError::EmptyGraph);
        }
        let input = graph_input(cg)?;
        Ok(self.activations(&[&input])?.pop().expect("one graph"))
    }

    pub(crate) fn activations(&self, inputs: &[&GraphInput]) -> Result<Vec<BackboneActivations>, PredictorError> {
        let b = batch(inputs);
        let mut t = Tape::new();
        let bv = self.backbone_vars(&mut t, &b)?;
        let mut out = Vec::with_capacity(inputs.len());
        let ge = t.value(bv.graph_embedding);
        for k in 0..inputs.len() {
            let (lo, hi) = (b.offsets[k], b.offsets[k + 1]);
            let layers = bv
                .layers
                .iter()
                .map(|&v| {
                    let m = t.value(v);
                    let c = m.cols();
                    Tensor::from_vec(hi - lo, c, m.data()[lo * c..hi * c].to_vec())
                })
                .collect::<Result<Vec<_>, _>>()?;
            out.push(BackboneActivations {
                layers,
                graph_embedding: Tensor::row_vector(ge.row(k).to_vec()),
            });
        }
        Ok(out)
    }

    /// Graph embedding of adapter `tag` given backbone activations of the same graph.
    pub fn forward_adapter(
        &self,
        tag: &str,
        cg: &ComputeGraph,
        acts: &BackboneActivations,
    ) -> Result<Tensor, PredictorError> {
        if !self.adapters.contains(tag) {
            return Err(PredictorError::UnknownAdapter(tag.to_string()));
        }
        let input = graph_input(cg)?;
        if acts.layers.len() != self.config.n_gnn_layers + 1
            || acts.layers.iter().any(|l| l.rows() != input.nodes())
        {
            return Err(NumericError::Shape {
                op: "forward_adapter",
                lhs: (input.nodes(), self.config.n_gnn_layers + 1),
                rhs: (acts.layers.first().map_or(0, Tensor::rows), acts.layers.len()),
            }
            .into());
        }
        let b = batch(&[&input]);
        let mut t = Tape::new();
        let bv = Self::backbone_consts(&mut t, &[acts]);
        let gk = self.adapter_embedding(&mut t, tag, &bv, &b)?;
        Ok(t.value(gk).clone())
    }

    /// Standardized-scale score of one graph.
    pub fn predict(&self, cg: &ComputeGraph, mode: Mode) -> Result<f64, PredictorError> {
        Ok(self.predict_many(std::slice::from_ref(cg), mode)?[0])
    }

    /// Prediction of a single adapter head.
    pub fn predict_adapter(&self, cg: &ComputeGraph, tag: &str) -> Result<f64, PredictorError> {
        if !self.adapters.contains(tag) {
            return Err(PredictorError::UnknownAdapter(tag.to_string()));
        }
        let input = graph_input(cg)?;
        let b = batch(&[&input]);
        let mut t = Tape::new();
        let bv = self.backbone_vars(&mut t, &b)?;
        let out = self.adapter_output(&mut t, tag, &bv, &b)?;
        Ok(t.value(out).item())
    }

    pub fn predict_many(&self, cgs: &[ComputeGraph], mode: Mode) -> Result<Vec<f64>, PredictorError> {
        let inputs = cgs.iter().map(graph_input).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        self.predict_inputs(&refs, mode)
    }

    pub(crate) fn predict_inputs(&self, inputs: &[&GraphInput], mode: Mode) -> Result<Vec<f64>, PredictorError> {
        let mode = self.resolve(mode)?;
        if inputs.iter().any(|g| g.nodes() == 0) {
            return Err(PredictorError::EmptyGraph);
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let b = batch(chunk);
            let mut t = Tape::new();
            let bv = self.backbone_vars(&mut t, &b)?;
            match mode {
                Mode::Backbone => {
                    let y = self.head(&mut t, "head.backbone", bv.graph_embedding)?;
                    out.extend_from_slice(t.value(y).data());
                }
                _ => {
                    let mut sums = vec![0.0; chunk.len()];
                    for tag in &self.adapters {
                        let y = self.adapter_output(&mut t, tag, &bv, &b)?;
                        for (s, v) in sums.iter_mut().zip(t.value(y).data()) {
                            *s += v;
                        }
                    }
                    let k = self.adapters.len() as f64;
                    out.extend(sums.into_iter().map(|s| s / k));
                }
            }
        }
        Ok(out)
    }

    // ---- persistence ----

    pub fn to_bytes(&self, config_hash: &str) -> Vec<u8> {
        let m = Manifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            adapters: self.adapters.iter().cloned().collect(),
            has_backbone_head: self.has_backbone_head,
            scalings: self.scalings.clone(),
            config_hash: config_hash.to_string(),
        };
        let manifest = serde_json::to_string(&m).expect("manifest serializes");
        checkpoint::encode(&manifest, &self.store)
    }

    /// Loads a predictor and the config hash recorded with it.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String), PredictorError> {
        let (manifest, store) = checkpoint::decode(bytes)?;
        let m: Manifest = serde_json::from_str(&manifest).map_err(|e| PredictorError::Manifest(e.to_string()))?;
        if m.format != FORMAT {
            return Err(PredictorError::Manifest(format!("format `{}`", m.format)));
        }
        m.config.validate()?;
        for tag in &m.adapters {
            check_tag(tag)?;
        }
        let p = Predictor {
            config: m.config,
            store,
            adapters: m.adapters.into_iter().collect(),
            has_backbone_head: m.has_backbone_head,
            scalings: m.scalings,
        };
        Ok((p, m.config_hash))
    }
}

#[cfg(test)]
mod tests;
