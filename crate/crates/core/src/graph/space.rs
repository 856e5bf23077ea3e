//! Synthetic architecture spaces.
//!
//! Macro-like spaces stack searchable blocks (variable depth per stage,
//! kernel size and width) in the style of once-for-all supernets; the
//! cell-like space stacks one randomly wired 7-vertex cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CgNode, ComputeGraph, GraphMeta, OpKind, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    MacroLike,
    CellLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStyle {
    /// expand 1x1, depthwise kxk, optional squeeze-excite, project 1x1
    MobileInverted,
    /// 1x1 reduce, kxk, 1x1 expand, residual
    Bottleneck,
    /// conv-bn-relu with max-pool downsampling, no residuals
    Plain,
    /// randomly wired cell shared by every stack position
    Cell,
}

/// One resolution level. For the cell-like family a stage is a stack of cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: u32,
    pub stride: u32,
    pub min_depth: u32,
    pub max_depth: u32,
    #[serde(default)]
    pub se: bool,
}

impl StageSpec {
    const fn new(channels: u32, stride: u32, min_depth: u32, max_depth: u32, se: bool) -> Self {
        StageSpec { channels, stride, min_depth, max_depth, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub name: String,
    pub family: Family,
    pub style: BlockStyle,
    pub block_count_range: (u32, u32),
    pub kernel_choices: Vec<u32>,
    /// Channel expansion (inverted residual) or reduction (bottleneck) ratios.
    pub expansion_choices: Vec<f64>,
    /// Per-stage channel multipliers; channels are rounded to multiples of 8.
    pub width_multipliers: Vec<f64>,
    pub stages: Vec<StageSpec>,
    pub activation: OpKind,
    pub resolution: u32,
    pub stem_channels: u32,
    pub head_channels: u32,
    pub classes: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpaceError {
    #[error("space `{0}`: empty block-count range")]
    EmptyRange(String),
    #[error("space `{space}`: block-count range [{lo}, {hi}] outside producible [{min}, {max}]")]
    Infeasible { space: String, lo: u32, hi: u32, min: u32, max: u32 },
    #[error("space `{space}`: no {what} choices")]
    EmptyChoices { space: String, what: &'static str },
    #[error("unknown space preset `{0}`")]
    UnknownPreset(String),
}

impl SpaceSpec {
    pub fn mbv3_like() -> Self {
        SpaceSpec {
            name: "mbv3-like".into(),
            family: Family::MacroLike,
            style: BlockStyle::MobileInverted,
            block_count_range: (10, 20),
            kernel_choices: vec![3, 5, 7],
            expansion_choices: vec![3.0, 4.0, 6.0],
            width_multipliers: vec![1.0],
            stages: vec![
                StageSpec::new(24, 2, 2, 4, false),
                StageSpec::new(40, 2, 2, 4, true),
                StageSpec::new(80, 2, 2, 4, false),
                StageSpec::new(112, 1, 2, 4, true),
                StageSpec::new(160, 2, 2, 4, true),
            ],
            activation: OpKind::Hswish,
            resolution: 224,
            stem_channels: 16,
            head_channels: 960,
            classes: 1000,
        }
    }

    pub fn pn_like() -> Self {
        SpaceSpec {
            name: "pn-like".into(),
            family: Family::MacroLike,
            style: BlockStyle::MobileInverted,
            block_count_range: (11, 21),
            kernel_choices: vec![3, 5, 7],
            expansion_choices: vec![3.0, 4.0, 6.0],
            width_multipliers: vec![1.0],
            stages: vec![
                StageSpec::new(16, 1, 1, 1, false),
                StageSpec::new(24, 2, 2, 4, false),
                StageSpec::new(40, 2, 2, 4, false),
                StageSpec::new(80, 2, 2, 4, false),
                StageSpec::new(96, 1, 2, 4, false),
                StageSpec::new(192, 2, 2, 4, false),
            ],
            activation: OpKind::Relu6,
            resolution: 224,
            stem_channels: 32,
            head_channels: 1280,
            classes: 1000,
        }
    }

    pub fn r50_like() -> Self {
        SpaceSpec {
            name: "r50-like".into(),
            family: Family::MacroLike,
            style: BlockStyle::Bottleneck,
            block_count_range: (10, 20),
            kernel_choices: vec![3],
            expansion_choices: vec![0.2, 0.25, 0.35],
            width_multipliers: vec![0.65, 0.8, 1.0],
            stages: vec![
                StageSpec::new(256, 1, 2, 4, false),
                StageSpec::new(512, 2, 2, 4, false),
                StageSpec::new(1024, 2, 4, 8, false),
                StageSpec::new(2048, 2, 2, 4, false),
            ],
            activation: OpKind::Relu,
            resolution: 224,
            stem_channels: 64,
            head_channels: 2048,
            classes: 1000,
        }
    }

    /// VGG-style plain networks with widely varying width; used as an
    /// out-of-space "model zoo".
    pub fn plain_like() -> Self {
        SpaceSpec {
            name: "plain-like".into(),
            family: Family::MacroLike,
            style: BlockStyle::Plain,
            block_count_range: (8, 13),
            kernel_choices: vec![3],
            expansion_choices: vec![1.0],
            width_multipliers: vec![0.25, 0.5, 0.75, 1.0, 1.5],
            stages: vec![
                StageSpec::new(64, 1, 1, 2, false),
                StageSpec::new(128, 2, 1, 2, false),
                StageSpec::new(256, 2, 2, 3, false),
                StageSpec::new(512, 2, 2, 3, false),
                StageSpec::new(512, 2, 2, 3, false),
            ],
            activation: OpKind::Relu,
            resolution: 224,
            stem_channels: 32,
            head_channels: 512,
            classes: 1000,
        }
    }

    /// Three stacks of 1-2 identical 7-vertex cells at 32x32 input.
    pub fn cell_like() -> Self {
        SpaceSpec {
            name: "cell-like".into(),
            family: Family::CellLike,
            style: BlockStyle::Cell,
            block_count_range: (3, 6),
            kernel_choices: vec![1, 3],
            expansion_choices: vec![1.0],
            width_multipliers: vec![1.0],
            stages: vec![
                StageSpec::new(64, 1, 1, 2, false),
                StageSpec::new(128, 2, 1, 2, false),
                StageSpec::new(256, 2, 1, 2, false),
            ],
            activation: OpKind::Relu,
            resolution: 32,
            stem_channels: 64,
            head_channels: 256,
            classes: 10,
        }
    }

    pub fn preset(name: &str) -> Result<Self, SpaceError> {
        match name {
            "mbv3-like" => Ok(Self::mbv3_like()),
            "pn-like" => Ok(Self::pn_like()),
            "r50-like" => Ok(Self::r50_like()),
            "plain-like" => Ok(Self::plain_like()),
            "cell-like" => Ok(Self::cell_like()),
            other => Err(SpaceError::UnknownPreset(other.to_string())),
        }
    }

    pub const PRESETS: [&'static str; 5] = ["mbv3-like", "pn-like", "r50-like", "plain-like", "cell-like"];

    /// Block counts the stage layout can produce.
    pub fn producible_range(&self) -> (u32, u32) {
        (
            self.stages.iter().map(|s| s.min_depth).sum(),
            self.stages.iter().map(|s| s.max_depth).sum(),
        )
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        let (lo, hi) = self.block_count_range;
        if lo > hi {
            return Err(SpaceError::EmptyRange(self.name.clone()));
        }
        let empty = |what| SpaceError::EmptyChoices { space: self.name.clone(), what };
        if self.kernel_choices.is_empty() || self.kernel_choices.contains(&0) {
            return Err(empty("kernel"));
        }
        if self.expansion_choices.is_empty() || self.expansion_choices.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(empty("expansion"));
        }
        if self.width_multipliers.is_empty() || self.width_multipliers.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(empty("width"));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.min_depth > s.max_depth || s.stride == 0) {
            return Err(empty("stage"));
        }
        let (min, max) = self.producible_range();
        if lo < min || hi > max {
            return Err(SpaceError::Infeasible { space: self.name.clone(), lo, hi, min, max });
        }
        Ok(())
    }

    pub fn with_block_range(&self, lo: u32, hi: u32) -> Result<Self, SpaceError> {
        let spec = SpaceSpec { block_count_range: (lo, hi), ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }
}

/// Splits a block-count range into five contiguous length bins; leftover
/// values widen the middle bins first. `[10, 20]` gives
/// `[10,11] [12,13] [14,16] [17,18] [19,20]`.
pub fn length_bins(range: (u32, u32)) -> Vec<(u32, u32)> {
    const BINS: usize = 5;
    let (lo, hi) = range;
    let n = (hi - lo + 1) as usize;
    if n < BINS {
        return (lo..=hi).map(|v| (v, v)).collect();
    }
    let mut widths = vec![n / BINS; BINS];
    let order = [2usize, 1, 3, 0, 4];
    for &i in order.iter().take(n % BINS) {
        widths[i] += 1;
    }
    let mut start = lo;
    widths
        .into_iter()
        .map(|w| {
            let bin = (start, start + w as u32 - 1);
            start += w as u32;
            bin
        })
        .collect()
}

pub(crate) fn make_divisible(x: f64, divisor: u32) -> u32 {
    let d = divisor as f64;
    let v = (((x + d / 2.0) / d).floor() * d).max(d);
    let v = if v < 0.9 * x { v + d } else { v };
    v as u32
}

#[derive(Clone, Copy)]
struct T {
    id: u32,
    shape: Shape,
}

struct Builder {
    cg: ComputeGraph,
    next: u32,
}

impl Builder {
    fn node(&mut self, op: OpKind, in_shape: Shape, out_shape: Shape, w: Vec<u32>, bias: bool, preds: &[u32]) -> T {
        let id = self.next;
        self.next += 1;
        self.cg.nodes.push(CgNode::new(id, op, in_shape, out_shape).with_weights(w, bias));
        self.cg.edges.extend(preds.iter().map(|&p| (p, id)));
        T { id, shape: out_shape }
    }

    fn input(&mut self, s: Shape) -> T {
        self.node(OpKind::Input, s, s, vec![], false, &[])
    }

    fn unary(&mut self, op: OpKind, t: T) -> T {
        self.node(op, t.shape, t.shape, vec![], false, &[t.id])
    }

    fn conv(&mut self, t: T, k: u32, stride: u32, c_out: u32) -> T {
        let out = Shape::new(t.shape.h.div_ceil(stride), t.shape.w.div_ceil(stride), c_out);
        self.node(OpKind::Conv, t.shape, out, vec![k, k, t.shape.c, c_out], false, &[t.id])
    }

    fn dw(&mut self, t: T, k: u32, stride: u32) -> T {
        let out = Shape::new(t.shape.h.div_ceil(stride), t.shape.w.div_ceil(stride), t.shape.c);
        self.node(OpKind::DepthwiseConv, t.shape, out, vec![k, k, t.shape.c, 1], false, &[t.id])
    }

    fn bn(&mut self, t: T) -> T {
        self.node(OpKind::BatchNorm, t.shape, t.shape, vec![t.shape.c], false, &[t.id])
    }

    fn pool(&mut self, op: OpKind, t: T, stride: u32) -> T {
        let out = Shape::new(t.shape.h.div_ceil(stride), t.shape.w.div_ceil(stride), t.shape.c);
        self.node(op, t.shape, out, vec![], false, &[t.id])
    }

    fn global_pool(&mut self, t: T) -> T {
        self.node(OpKind::GlobalPool, t.shape, Shape::new(1, 1, t.shape.c), vec![], false, &[t.id])
    }

    fn linear(&mut self, t: T, d: u32) -> T {
        let out = t.shape.with_channels(d);
        self.node(OpKind::Linear, t.shape, out, vec![t.shape.c, d], true, &[t.id])
    }

    fn add(&mut self, a: T, b: T) -> T {
        self.node(OpKind::Add, a.shape, a.shape, vec![], false, &[a.id, b.id])
    }

    fn concat(&mut self, parts: &[T]) -> T {
        let c = parts.iter().map(|p| p.shape.c).sum();
        let s = parts[0].shape.with_channels(c);
        let ids: Vec<u32> = parts.iter().map(|p| p.id).collect();
        self.node(OpKind::Concat, s, s, vec![], false, &ids)
    }

    /// global-pool -> linear -> relu -> linear -> sigmoid -> mul
    fn squeeze_excite(&mut self, t: T) -> T {
        let g = self.global_pool(t);
        let squeezed = make_divisible(t.shape.c as f64 / 4.0, 8);
        let l1 = self.linear(g, squeezed);
        let r = self.unary(OpKind::Relu, l1);
        let l2 = self.linear(r, t.shape.c);
        let s = self.unary(OpKind::Sigmoid, l2);
        self.node(OpKind::Mul, t.shape, t.shape, vec![], false, &[t.id, s.id])
    }

    fn output(&mut self, t: T) -> T {
        self.unary(OpKind::Output, t)
    }
}

fn pick<'a, X>(rng: &mut impl Rng, xs: &'a [X]) -> &'a X {
    &xs[rng.random_range(0..xs.len())]
}

fn stage_depths(spec: &SpaceSpec, total: u32, rng: &mut impl Rng) -> Vec<u32> {
    let mut depths: Vec<u32> = spec.stages.iter().map(|s| s.min_depth).collect();
    let mut remaining = total - depths.iter().sum::<u32>();
    while remaining > 0 {
        let open: Vec<usize> = (0..depths.len()).filter(|&i| depths[i] < spec.stages[i].max_depth).collect();
        let i = *pick(rng, &open);
        depths[i] += 1;
        remaining -= 1;
    }
    depths
}

/// Samples one architecture from `spec`; deterministic per `(spec, seed)`.
pub fn gen_space(spec: &SpaceSpec, seed: u64) -> Result<ComputeGraph, SpaceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.block_count_range;
    let total = rng.random_range(lo..=hi);
    let depths = stage_depths(spec, total, &mut rng);
    let mut b = Builder {
        cg: ComputeGraph::new(GraphMeta {
            name: format!("{}-{seed}", spec.name),
            space: spec.name.clone(),
            block_count: total,
        }),
        next: 0,
    };
    let res = spec.resolution;
    let x = b.input(Shape::new(res, res, 3));
    let head_in = match spec.style {
        BlockStyle::Cell => build_cells(&mut b, spec, &depths, x, &mut rng),
        _ => build_macro(&mut b, spec, &depths, x, &mut rng),
    };
    let mut t = head_in;
    if spec.style == BlockStyle::MobileInverted {
        let c = b.conv(t, 1, 1, spec.head_channels);
        let c = b.bn(c);
        t = b.unary(spec.activation, c);
    }
    let g = b.global_pool(t);
    let logits = b.linear(g, spec.classes);
    b.output(logits);
    Ok(b.cg)
}

fn build_macro(b: &mut Builder, spec: &SpaceSpec, depths: &[u32], x: T, rng: &mut impl Rng) -> T {
    let act = spec.activation;
    let mut t = match spec.style {
        BlockStyle::Bottleneck => {
            let c = b.conv(x, 7, 2, spec.stem_channels);
            let c = b.bn(c);
            let r = b.unary(act, c);
            b.pool(OpKind::MaxPool, r, 2)
        }
        _ => {
            let c = b.conv(x, 3, 2, spec.stem_channels);
            let c = b.bn(c);
            b.unary(act, c)
        }
    };
    for (stage, &depth) in spec.stages.iter().zip(depths) {
        let mult = *pick(rng, &spec.width_multipliers);
        let c_out = make_divisible(stage.channels as f64 * mult, 8);
        for j in 0..depth {
            let stride = if j == 0 { stage.stride } else { 1 };
            let k = *pick(rng, &spec.kernel_choices);
            let e = *pick(rng, &spec.expansion_choices);
            t = match spec.style {
                BlockStyle::MobileInverted => mobile_block(b, t, c_out, k, e, stride, stage.se, act),
                BlockStyle::Bottleneck => bottleneck_block(b, t, c_out, k, e, stride, act),
                _ => plain_block(b, t, c_out, k, stride, act),
            };
        }
    }
    t
}

#[allow(clippy::too_many_arguments)]
fn mobile_block(b: &mut Builder, t: T, c_out: u32, k: u32, e: f64, stride: u32, se: bool, act: OpKind) -> T {
    let mut x = t;
    if e != 1.0 {
        let mid = make_divisible(t.shape.c as f64 * e, 8);
        let c = b.conv(x, 1, 1, mid);
        let n = b.bn(c);
        x = b.unary(act, n);
    }
    let d = b.dw(x, k, stride);
    let n = b.bn(d);
    x = b.unary(act, n);
    if se {
        x = b.squeeze_excite(x);
    }
    let p = b.conv(x, 1, 1, c_out);
    let p = b.bn(p);
    if stride == 1 && t.shape.c == c_out {
        b.add(t, p)
    } else {
        p
    }
}

fn bottleneck_block(b: &mut Builder, t: T, c_out: u32, k: u32, e: f64, stride: u32, act: OpKind) -> T {
    let mid = make_divisible(c_out as f64 * e, 8);
    let c = b.conv(t, 1, 1, mid);
    let n = b.bn(c);
    let x = b.unary(act, n);
    let c = b.conv(x, k, stride, mid);
    let n = b.bn(c);
    let x = b.unary(act, n);
    let c = b.conv(x, 1, 1, c_out);
    let x = b.bn(c);
    let skip = if stride == 1 && t.shape.c == c_out {
        t
    } else {
        let c = b.conv(t, 1, stride, c_out);
        b.bn(c)
    };
    let s = b.add(skip, x);
    b.unary(act, s)
}

fn plain_block(b: &mut Builder, t: T, c_out: u32, k: u32, stride: u32, act: OpKind) -> T {
    let t = if stride > 1 { b.pool(OpKind::MaxPool, t, stride) } else { t };
    let c = b.conv(t, k, 1, c_out);
    let n = b.bn(c);
    b.unary(act, n)
}

#[derive(Clone, Copy)]
enum CellOp {
    Conv(u32),
    MaxPool,
}

const CELL_OPS: usize = 5;

fn build_cells(b: &mut Builder, spec: &SpaceSpec, depths: &[u32], x: T, rng: &mut impl Rng) -> T {
    // vertex 0 is the cell input, 1..=CELL_OPS are operations
    let mut preds: Vec<Vec<usize>> = vec![Vec::new()];
    let mut ops = vec![CellOp::MaxPool];
    for v in 1..=CELL_OPS {
        let mut p = vec![rng.random_range(0..v)];
        for u in 0..v {
            if !p.contains(&u) && rng.random_bool(0.25) {
                p.push(u);
            }
        }
        p.sort_unstable();
        preds.push(p);
        ops.push(if rng.random_bool(0.3) {
            CellOp::MaxPool
        } else {
            CellOp::Conv(*pick(rng, &spec.kernel_choices))
        });
    }
    let has_succ: Vec<bool> = (0..=CELL_OPS).map(|u| preds.iter().any(|p| p.contains(&u))).collect();
    let leaves: Vec<usize> = (1..=CELL_OPS).filter(|&v| !has_succ[v]).collect();

    let c = b.conv(x, 3, 1, spec.stem_channels);
    let c = b.bn(c);
    let mut t = b.unary(spec.activation, c);
    for (stage, &depth) in spec.stages.iter().zip(depths) {
        if stage.stride > 1 {
            t = b.pool(OpKind::MaxPool, t, stage.stride);
        }
        for _ in 0..depth {
            let ch = stage.channels;
            let c = b.conv(t, 1, 1, ch);
            let n = b.bn(c);
            let mut vals = vec![b.unary(spec.activation, n)];
            for v in 1..=CELL_OPS {
                let mut inp = vals[preds[v][0]];
                for &u in &preds[v][1..] {
                    inp = b.add(inp, vals[u]);
                }
                let out = match ops[v] {
                    CellOp::Conv(k) => {
                        let c = b.conv(inp, k, 1, ch);
                        let n = b.bn(c);
                        b.unary(spec.activation, n)
                    }
                    CellOp::MaxPool => b.pool(OpKind::MaxPool, inp, 1),
                };
                vals.push(out);
            }
            let parts: Vec<T> = leaves.iter().map(|&v| vals[v]).collect();
            let joined = if parts.len() > 1 { b.concat(&parts) } else { parts[0] };
            let c = b.conv(joined, 1, 1, ch);
            t = b.bn(c);
        }
    }
    t
}
