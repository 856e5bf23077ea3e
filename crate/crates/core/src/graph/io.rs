//! Line-oriented JSON encoding of computational graphs.
//!
//! One object per line:
//! `{"name", "space", "block_count", "nodes": [{"id", "op", "in", "out", "wshape", "bias"}], "edges"}`.
//! Every field is required and unknown fields are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CgNode, ComputeGraph, GraphMeta, OpKind, Shape};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: u32,
    pub op: OpKind,
    #[serde(rename = "in")]
    pub in_shape: [u32; 3],
    #[serde(rename = "out")]
    pub out_shape: [u32; 3],
    pub wshape: Option<Vec<u32>>,
    pub bias: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CgRecord {
    pub name: String,
    pub space: String,
    pub block_count: u32,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[u32; 2]>,
}

fn shape(s: [u32; 3]) -> Shape {
    Shape::new(s[0], s[1], s[2])
}

impl From<&ComputeGraph> for CgRecord {
    fn from(cg: &ComputeGraph) -> Self {
        CgRecord {
            name: cg.meta.name.clone(),
            space: cg.meta.space.clone(),
            block_count: cg.meta.block_count,
            nodes: cg
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    op: n.op,
                    in_shape: [n.in_shape.h, n.in_shape.w, n.in_shape.c],
                    out_shape: [n.out_shape.h, n.out_shape.w, n.out_shape.c],
                    wshape: if n.weight_shape.is_empty() { None } else { Some(n.weight_shape.clone()) },
                    bias: n.has_bias,
                })
                .collect(),
            edges: cg.edges.iter().map(|&(s, d)| [s, d]).collect(),
        }
    }
}

impl From<CgRecord> for ComputeGraph {
    fn from(r: CgRecord) -> Self {
        ComputeGraph {
            meta: GraphMeta { name: r.name, space: r.space, block_count: r.block_count },
            nodes: r
                .nodes
                .into_iter()
                .map(|n| CgNode {
                    id: n.id,
                    op: n.op,
                    in_shape: shape(n.in_shape),
                    out_shape: shape(n.out_shape),
                    weight_shape: n.wshape.unwrap_or_default(),
                    has_bias: n.bias,
                })
                .collect(),
            edges: r.edges.into_iter().map(|[s, d]| (s, d)).collect(),
        }
    }
}

/// Single-line JSON record for `cg`.
pub fn serialize_cg(cg: &ComputeGraph) -> String {
    serde_json::to_string(&CgRecord::from(cg)).expect("graph records always serialize")
}

/// Parses one record. Errors carry the line and the offending field.
pub fn parse_cg(text: &str) -> Result<ComputeGraph, ParseError> {
    parse_cg_at(text, 1)
}

pub(crate) fn parse_cg_at(text: &str, line: usize) -> Result<ComputeGraph, ParseError> {
    serde_json::from_str::<CgRecord>(text.trim())
        .map(ComputeGraph::from)
        .map_err(|e| ParseError { line: line + e.line().saturating_sub(1), message: e.to_string() })
}

/// Stable 64-bit fingerprint of a graph, derived from its serialization.
pub fn graph_hash(cg: &ComputeGraph) -> u64 {
    let digest = Sha256::digest(serialize_cg(cg).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}
