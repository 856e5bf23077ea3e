use super::{validate, CgNode, ComputeGraph, OpKind};
use crate::error::GraphError;

/// FLOPs of one node, counting a multiply-accumulate as two operations.
pub fn node_flops(n: &CgNode) -> u64 {
    let out_px = n.out_shape.h as u64 * n.out_shape.w as u64;
    let in_px = n.in_shape.h as u64 * n.in_shape.w as u64;
    let weight = |i: usize| n.weight_shape.get(i).copied().unwrap_or(0) as u64;
    let bias = if n.has_bias { n.out_shape.elements() } else { 0 };
    let core = match n.op {
        OpKind::Conv => 2 * weight(0) * weight(1) * weight(2) * weight(3) * out_px,
        // groups = c_in, so each output channel sees one input channel
        OpKind::DepthwiseConv => 2 * weight(0) * weight(1) * n.out_shape.c as u64 * out_px,
        // every input pixel scatters a kh x kw x c_out patch
        OpKind::Deconv => 2 * weight(0) * weight(1) * weight(2) * weight(3) * in_px,
        OpKind::Linear => 2 * weight(0) * weight(1) * out_px,
        OpKind::Relu
        | OpKind::Relu6
        | OpKind::Hswish
        | OpKind::Sigmoid
        | OpKind::BatchNorm
        | OpKind::Add
        | OpKind::Mul
        | OpKind::Upsample => n.out_shape.elements(),
        // reductions touch every input element once
        OpKind::Mean | OpKind::MaxPool | OpKind::AvgPool | OpKind::GlobalPool => n.in_shape.elements(),
        OpKind::Concat | OpKind::Pad | OpKind::Input | OpKind::Output => 0,
    };
    core + bias
}

/// Exact FLOP count of a validating graph.
pub fn flop_count(cg: &ComputeGraph) -> Result<u64, GraphError> {
    let violations = validate(cg);
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations));
    }
    Ok(cg.nodes.iter().map(node_flops).sum())
}

/// Total FLOPs in GigaFLOPs (units of 1e9).
pub fn flops(cg: &ComputeGraph) -> Result<f64, GraphError> {
    flop_count(cg).map(|f| f as f64 / 1e9)
}

/// Learnable parameter count: weight tensor sizes plus one bias per output channel.
pub fn param_count(cg: &ComputeGraph) -> u64 {
    cg.nodes
        .iter()
        .map(|n| {
            let w: u64 = if n.weight_shape.is_empty() {
                0
            } else {
                n.weight_shape.iter().map(|&d| d as u64).product()
            };
            w + if n.has_bias { n.out_shape.c as u64 } else { 0 }
        })
        .sum()
}
