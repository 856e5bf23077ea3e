//! Computational graphs: fine-grained DAGs of atomic neural-network
//! operations with shape, weight and bias features on every node.

mod flops;
mod io;
mod space;
mod validate;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

pub use flops::{flop_count, flops, node_flops, param_count};
pub use io::{graph_hash, parse_cg, serialize_cg, CgRecord, NodeRecord, ParseError};
pub use space::{gen_space, length_bins, BlockStyle, Family, SpaceError, SpaceSpec, StageSpec};
pub use validate::{topo_order, validate, Violation};

/// Operation category of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv,
    DepthwiseConv,
    Deconv,
    Linear,
    Relu,
    Relu6,
    Hswish,
    Sigmoid,
    BatchNorm,
    Add,
    Mul,
    Concat,
    Mean,
    MaxPool,
    AvgPool,
    GlobalPool,
    Pad,
    Upsample,
    Input,
    Output,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Conv,
        OpKind::DepthwiseConv,
        OpKind::Deconv,
        OpKind::Linear,
        OpKind::Relu,
        OpKind::Relu6,
        OpKind::Hswish,
        OpKind::Sigmoid,
        OpKind::BatchNorm,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::Mean,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::GlobalPool,
        OpKind::Pad,
        OpKind::Upsample,
        OpKind::Input,
        OpKind::Output,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::DepthwiseConv => "depthwise-conv",
            OpKind::Deconv => "deconv",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::Relu6 => "relu6",
            OpKind::Hswish => "hswish",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Mean => "mean",
            OpKind::MaxPool => "max-pool",
            OpKind::AvgPool => "avg-pool",
            OpKind::GlobalPool => "global-pool",
            OpKind::Pad => "pad",
            OpKind::Upsample => "upsample",
            OpKind::Input => "input",
            OpKind::Output => "output",
        }
    }

    /// Position in the one-hot category vector.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Ops that own a weight tensor.
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            OpKind::Conv | OpKind::DepthwiseConv | OpKind::Deconv | OpKind::Linear | OpKind::BatchNorm
        )
    }

    pub fn is_activation(self) -> bool {
        matches!(self, OpKind::Relu | OpKind::Relu6 | OpKind::Hswish | OpKind::Sigmoid)
    }

    /// Ops that accept more than one incoming edge.
    pub fn is_merge(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Mul | OpKind::Concat)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown op kind `{0}`")]
pub struct UnknownOpKind(pub String);

impl serde::Serialize for OpKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for OpKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for OpKind {
    type Err = UnknownOpKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownOpKind(s.to_string()))
    }
}

/// Tensor extent as (height, width, channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub h: u32,
    pub w: u32,
    pub c: u32,
}

impl Shape {
    pub const fn new(h: u32, w: u32, c: u32) -> Self {
        Shape { h, w, c }
    }

    pub fn elements(&self) -> u64 {
        self.h as u64 * self.w as u64 * self.c as u64
    }

    pub fn is_positive(&self) -> bool {
        self.h > 0 && self.w > 0 && self.c > 0
    }

    pub fn with_channels(self, c: u32) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CgNode {
    pub id: u32,
    pub op: OpKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    /// Conv: `[kh, kw, c_in, c_out]`; depthwise: `[kh, kw, c, 1]`;
    /// deconv: `[kh, kw, c_in, c_out]`; linear: `[d_in, d_out]`; batchnorm: `[c]`.
    pub weight_shape: Vec<u32>,
    pub has_bias: bool,
}

impl CgNode {
    pub fn new(id: u32, op: OpKind, in_shape: Shape, out_shape: Shape) -> Self {
        CgNode { id, op, in_shape, out_shape, weight_shape: Vec::new(), has_bias: false }
    }

    pub fn with_weights(mut self, weight_shape: Vec<u32>, has_bias: bool) -> Self {
        self.weight_shape = weight_shape;
        self.has_bias = has_bias;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct GraphMeta {
    pub name: String,
    pub space: String,
    pub block_count: u32,
}

/// A directed acyclic graph of atomic operations. Edges carry no features.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ComputeGraph {
    pub meta: GraphMeta,
    pub nodes: Vec<CgNode>,
    pub edges: Vec<(u32, u32)>,
}

impl ComputeGraph {
    pub fn new(meta: GraphMeta) -> Self {
        ComputeGraph { meta, nodes: Vec::new(), edges: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Map from node id to its position in `nodes`. Later duplicates win;
    /// `validate` reports duplicate ids separately.
    pub fn index_of(&self) -> HashMap<u32, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    pub fn node(&self, id: u32) -> Option<&CgNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: u32) -> Option<&mut CgNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Ids of direct predecessors of `id`, in edge order.
    pub fn predecessors(&self, id: u32) -> Vec<u32> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect()
    }

    /// Ids of direct successors of `id`, in edge order.
    pub fn successors(&self, id: u32) -> Vec<u32> {
        self.edges.iter().filter(|e| e.0 == id).map(|e| e.1).collect()
    }

    pub fn max_id(&self) -> Option<u32> {
        self.nodes.iter().map(|n| n.id).max()
    }

    /// Structural equality up to node and edge ordering.
    pub fn same_structure(&self, other: &ComputeGraph) -> bool {
        if self.meta != other.meta {
            return false;
        }
        let mut a = self.nodes.clone();
        let mut b = other.nodes.clone();
        a.sort_by_key(|n| n.id);
        b.sort_by_key(|n| n.id);
        let mut ea = self.edges.clone();
        let mut eb = other.edges.clone();
        ea.sort_unstable();
        eb.sort_unstable();
        a == b && ea == eb
    }
}
