use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;

use super::{ComputeGraph, OpKind, Shape};
use crate::error::GraphError;

/// A single broken graph invariant. Validation returns these as data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNodeId(u32),
    NonPositiveShape { id: u32 },
    WeightPresence { id: u32, op: OpKind },
    BiasOnWeightless { id: u32 },
    DanglingEdge { src: u32, dst: u32 },
    Cycle { nodes: Vec<u32> },
    InputCount(usize),
    Unreachable { id: u32 },
    InDegree { id: u32, op: OpKind, found: usize },
    ShapeMismatch { src: u32, dst: u32, expected: Shape, found: Shape },
    ConcatChannels { id: u32, expected: u32, found: u32 },
    OpShape { id: u32, op: OpKind, reason: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Violation::NonPositiveShape { id } => write!(f, "node {id}: non-positive shape"),
            Violation::WeightPresence { id, op } => {
                write!(f, "node {id}: weight shape inconsistent with op `{op}`")
            }
            Violation::BiasOnWeightless { id } => write!(f, "node {id}: bias on weightless op"),
            Violation::DanglingEdge { src, dst } => write!(f, "dangling edge ({src}, {dst})"),
            Violation::Cycle { nodes } => write!(f, "cycle through nodes {nodes:?}"),
            Violation::InputCount(n) => write!(f, "expected exactly one input node, found {n}"),
            Violation::Unreachable { id } => write!(f, "node {id} unreachable from input"),
            Violation::InDegree { id, op, found } => {
                write!(f, "node {id}: op `{op}` cannot have in-degree {found}")
            }
            Violation::ShapeMismatch { src, dst, expected, found } => {
                write!(f, "shape mismatch on edge ({src}, {dst}): expected {expected}, found {found}")
            }
            Violation::ConcatChannels { id, expected, found } => {
                write!(f, "node {id}: concat expects {expected} channels, inputs sum to {found}")
            }
            Violation::OpShape { id, op, reason } => write!(f, "node {id} (`{op}`): {reason}"),
        }
    }
}

/// Returns every invariant violation of `cg`; an empty list means valid.
pub fn validate(cg: &ComputeGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen = HashSet::new();
    for n in &cg.nodes {
        if !seen.insert(n.id) {
            out.push(Violation::DuplicateNodeId(n.id));
        }
        if !n.in_shape.is_positive() || !n.out_shape.is_positive() {
            out.push(Violation::NonPositiveShape { id: n.id });
        }
        if n.op.is_weighted() == n.weight_shape.is_empty() || n.weight_shape.contains(&0) {
            out.push(Violation::WeightPresence { id: n.id, op: n.op });
        }
        if n.has_bias && !n.op.is_weighted() {
            out.push(Violation::BiasOnWeightless { id: n.id });
        }
        if let Some(reason) = op_shape_problem(n.op, n.in_shape, n.out_shape, &n.weight_shape) {
            out.push(Violation::OpShape { id: n.id, op: n.op, reason });
        }
    }

    let index = cg.index_of();
    let mut edges = Vec::with_capacity(cg.edges.len());
    for &(src, dst) in &cg.edges {
        if index.contains_key(&src) && index.contains_key(&dst) {
            edges.push((src, dst));
        } else {
            out.push(Violation::DanglingEdge { src, dst });
        }
    }

    if let Err(nodes) = kahn(cg.nodes.iter().map(|n| n.id), &edges) {
        out.push(Violation::Cycle { nodes });
    }

    let inputs: Vec<u32> = cg.nodes.iter().filter(|n| n.op == OpKind::Input).map(|n| n.id).collect();
    if inputs.len() != 1 {
        out.push(Violation::InputCount(inputs.len()));
    } else {
        let mut succ: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(s, d) in &edges {
            succ.entry(s).or_default().push(d);
        }
        let mut reached = HashSet::from([inputs[0]]);
        let mut stack = vec![inputs[0]];
        while let Some(v) = stack.pop() {
            for &w in succ.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if reached.insert(w) {
                    stack.push(w);
                }
            }
        }
        for n in &cg.nodes {
            if !reached.contains(&n.id) {
                out.push(Violation::Unreachable { id: n.id });
            }
        }
    }

    let mut preds: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(s, d) in &edges {
        preds.entry(d).or_default().push(s);
    }
    for dst in &cg.nodes {
        let ps = preds.get(&dst.id).map(Vec::as_slice).unwrap_or(&[]);
        let degree_ok = match dst.op {
            OpKind::Input => ps.is_empty(),
            op if op.is_merge() => !ps.is_empty(),
            _ => ps.len() == 1,
        };
        if !degree_ok {
            out.push(Violation::InDegree { id: dst.id, op: dst.op, found: ps.len() });
        }
        let srcs = ps.iter().map(|p| &cg.nodes[index[p]]);
        match dst.op {
            OpKind::Concat => {
                let mut total = 0u32;
                for src in srcs {
                    total = total.saturating_add(src.out_shape.c);
                    if src.out_shape.h != dst.in_shape.h || src.out_shape.w != dst.in_shape.w {
                        out.push(Violation::ShapeMismatch {
                            src: src.id,
                            dst: dst.id,
                            expected: dst.in_shape.with_channels(src.out_shape.c),
                            found: src.out_shape,
                        });
                    }
                }
                if !ps.is_empty() && total != dst.in_shape.c {
                    out.push(Violation::ConcatChannels { id: dst.id, expected: dst.in_shape.c, found: total });
                }
            }
            OpKind::Mul => {
                let broadcast = Shape::new(1, 1, dst.in_shape.c);
                for src in srcs {
                    if src.out_shape != dst.in_shape && src.out_shape != broadcast {
                        out.push(Violation::ShapeMismatch {
                            src: src.id,
                            dst: dst.id,
                            expected: dst.in_shape,
                            found: src.out_shape,
                        });
                    }
                }
            }
            _ => {
                for src in srcs {
                    if src.out_shape != dst.in_shape {
                        out.push(Violation::ShapeMismatch {
                            src: src.id,
                            dst: dst.id,
                            expected: dst.in_shape,
                            found: src.out_shape,
                        });
                    }
                }
            }
        }
    }
    out
}

fn op_shape_problem(op: OpKind, i: Shape, o: Shape, w: &[u32]) -> Option<&'static str> {
    let same_hw = i.h == o.h && i.w == o.w;
    match op {
        OpKind::Input | OpKind::Output | OpKind::Add | OpKind::Mul | OpKind::Concat | OpKind::BatchNorm
            if i != o =>
        {
            Some("input and output shapes differ")
        }
        op if op.is_activation() && i != o => Some("input and output shapes differ"),
        OpKind::BatchNorm if w != [i.c] => Some("batchnorm weights must be [c]"),
        OpKind::Conv | OpKind::Deconv if w.len() != 4 || w[2] != i.c || w[3] != o.c => {
            Some("weights must be [kh, kw, c_in, c_out]")
        }
        OpKind::DepthwiseConv if w.len() != 4 || w[2] != i.c || w[3] != 1 || o.c != i.c => {
            Some("depthwise weights must be [kh, kw, c, 1] with equal channels")
        }
        OpKind::Linear if w.len() != 2 || w[0] != i.c || w[1] != o.c || !same_hw => {
            Some("linear weights must be [d_in, d_out]")
        }
        OpKind::GlobalPool if o != Shape::new(1, 1, i.c) => Some("global pool must produce 1x1xC"),
        OpKind::Mean | OpKind::MaxPool | OpKind::AvgPool | OpKind::Pad | OpKind::Upsample if o.c != i.c => {
            Some("channel count must be preserved")
        }
        _ => None,
    }
}

/// Kahn's algorithm with smallest-id-first tie-breaking. On a cycle, returns
/// the sorted ids of nodes that could not be ordered.
fn kahn(ids: impl Iterator<Item = u32>, edges: &[(u32, u32)]) -> Result<Vec<u32>, Vec<u32>> {
    let ids: BTreeSet<u32> = ids.collect();
    let mut indeg: HashMap<u32, usize> = ids.iter().map(|&i| (i, 0)).collect();
    let mut succ: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(s, d) in edges {
        *indeg.get_mut(&d).expect("edge endpoints checked") += 1;
        succ.entry(s).or_default().push(d);
    }
    let mut ready: BinaryHeap<Reverse<u32>> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| Reverse(i)).collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in succ.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&w).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if order.len() == ids.len() {
        Ok(order)
    } else {
        let done: HashSet<u32> = order.into_iter().collect();
        Err(ids.into_iter().filter(|i| !done.contains(i)).collect())
    }
}

/// Deterministic topological order; ties are broken by ascending node id.
pub fn topo_order(cg: &ComputeGraph) -> Result<Vec<u32>, GraphError> {
    let index = cg.index_of();
    if let Some(&(src, dst)) =
        cg.edges.iter().find(|(s, d)| !index.contains_key(s) || !index.contains_key(d))
    {
        return Err(GraphError::Invalid(vec![Violation::DanglingEdge { src, dst }]));
    }
    kahn(cg.nodes.iter().map(|n| n.id), &cg.edges).map_err(|nodes| GraphError::Invalid(vec![Violation::Cycle { nodes }]))
}
