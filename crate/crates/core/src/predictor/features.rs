use std::sync::Arc;

use crate::error::GraphError;
use crate::graph::{validate, ComputeGraph, OpKind};
use crate::numeric::{Neighbors, Tensor};

/// one-hot op + ln(1+x) of in/out h,w,c + four weight dims + bias bit
pub const FEATURE_DIM: usize = OpKind::COUNT + 6 + 4 + 1;

/// Raw node features and adjacency for one graph, in `cg.nodes` order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub features: Tensor,
    pub neighbors: Arc<Neighbors>,
}

impl GraphInput {
    pub fn nodes(&self) -> usize {
        self.features.rows()
    }
}

fn ln1p(x: u32) -> f64 {
    (x as f64).ln_1p()
}

pub fn node_features(cg: &ComputeGraph) -> Tensor {
    let mut t = Tensor::zeros(cg.nodes.len(), FEATURE_DIM);
    for (r, n) in cg.nodes.iter().enumerate() {
        let row = t.row_mut(r);
        row[n.op.index()] = 1.0;
        let base = OpKind::COUNT;
        let dims = [n.in_shape.h, n.in_shape.w, n.in_shape.c, n.out_shape.h, n.out_shape.w, n.out_shape.c];
        for (k, d) in dims.into_iter().enumerate() {
            row[base + k] = ln1p(d);
        }
        for (k, &d) in n.weight_shape.iter().take(4).enumerate() {
            row[base + 6 + k] = ln1p(d);
        }
        row[FEATURE_DIM - 1] = if n.has_bias { 1.0 } else { 0.0 };
    }
    t
}

/// Neighbours are the union of predecessors and successors; parallel
/// edges contribute once per edge.
pub fn neighbor_lists(cg: &ComputeGraph) -> Neighbors {
    let idx = cg.index_of();
    let mut lists = vec![Vec::new(); cg.nodes.len()];
    for &(s, d) in &cg.edges {
        let (si, di) = (idx[&s], idx[&d]);
        lists[di].push(si as u32);
        lists[si].push(di as u32);
    }
    Neighbors { lists }
}

pub fn graph_input(cg: &ComputeGraph) -> Result<GraphInput, GraphError> {
    let v = validate(cg);
    if !v.is_empty() {
        return Err(GraphError::Invalid(v));
    }
    Ok(GraphInput { features: node_features(cg), neighbors: Arc::new(neighbor_lists(cg)) })
}

/// Block-diagonal union of several graphs.
pub(crate) struct Batch {
    pub features: Tensor,
    pub neighbors: Arc<Neighbors>,
    pub offsets: Arc<Vec<usize>>,
}

pub(crate) fn batch(inputs: &[&GraphInput]) -> Batch {
    let mut offsets = vec![0usize];
    let mut lists = Vec::new();
    let mut rows = Vec::new();
    for g in inputs {
        let base = *offsets.last().unwrap() as u32;
        lists.extend(g.neighbors.lists.iter().map(|l| l.iter().map(|&j| j + base).collect::<Vec<_>>()));
        rows.push(g.features.clone());
        offsets.push(offsets.last().unwrap() + g.nodes());
    }
    Batch {
        features: Tensor::stack_rows(&rows),
        neighbors: Arc::new(Neighbors { lists }),
        offsets: Arc::new(offsets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_space, CgNode, GraphMeta, Shape, SpaceSpec};

    #[test]
    fn feature_layout() {
        let s = Shape::new(4, 4, 8);
        let mut cg = ComputeGraph::new(GraphMeta::default());
        cg.nodes = vec![
            CgNode::new(0, OpKind::Input, s, s),
            CgNode::new(1, OpKind::Conv, s, s).with_weights(vec![3, 3, 8, 8], true),
            CgNode::new(2, OpKind::Output, s, s),
        ];
        cg.edges = vec![(0, 1), (1, 2)];
        let g = graph_input(&cg).unwrap();
        assert_eq!(g.features.cols(), 31);
        let conv = g.features.row(1);
        assert_eq!(conv[OpKind::Conv.index()], 1.0);
        assert_eq!(conv[..20].iter().sum::<f64>(), 1.0);
        assert!((conv[20] - 5f64.ln()).abs() < 1e-15);
        assert!((conv[28] - 9f64.ln()).abs() < 1e-15);
        assert_eq!(conv[30], 1.0);
        assert_eq!(g.features.row(0)[26..30], [0.0; 4]);
        assert_eq!(g.neighbors.lists, vec![vec![1], vec![0, 2], vec![1]]);
    }

    #[test]
    fn batch_offsets_neighbors() {
        let spec = SpaceSpec::preset("cell-like").unwrap();
        let a = graph_input(&gen_space(&spec, 1).unwrap()).unwrap();
        let b = graph_input(&gen_space(&spec, 2).unwrap()).unwrap();
        let bt = batch(&[&a, &b]);
        assert_eq!(*bt.offsets, vec![0, a.nodes(), a.nodes() + b.nodes()]);
        let shifted: Vec<u32> = b.neighbors.lists[0].iter().map(|j| j + a.nodes() as u32).collect();
        assert_eq!(bt.neighbors.lists[a.nodes()], shifted);
    }
}
