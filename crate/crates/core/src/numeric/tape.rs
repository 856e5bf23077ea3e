//! Reverse-mode differentiation over a linear tape of matrix ops.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::NumericError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row-wise neighbour lists: row `i` of a propagation output is the sum of
/// the input rows listed in `lists[i]`. Repeated indices count repeatedly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub lists: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    AddScalar(usize, usize),
    Mul(usize, usize),
    Concat(usize, usize),
    RowMean(usize),
    SegmentMean(usize, Arc<Vec<usize>>),
    Propagate(usize, Arc<Neighbors>),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Scale(usize, f64),
    Sum(usize),
    Mse(usize, usize),
}

struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of unfrozen parameters, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn accumulate(&mut self, other: Gradients) {
        for (k, g) in other.0 {
            match self.0.get_mut(&k) {
                Some(t) => t.add_assign(&g),
                None => {
                    self.0.insert(k, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.scale_in_place(s);
        }
    }
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::Shape { op, lhs: a.shape(), rhs: b.shape() }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.entries.push(Entry { value, op, requires_grad });
        Var(self.entries.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.entries[i].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Reads a parameter from `store`; frozen parameters receive no gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericError> {
        let p = store.get(name).ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        let trainable = !p.frozen;
        Ok(self.push(p.value.clone(), Op::Param(name.to_string()), trainable))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let v = x.matmul(y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let v = x.zip_map(y, |p, q| p + q);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x, y));
        }
        let v = x.zip_map(y, |p, q| p - q);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    /// Adds the 1 x c row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(r));
        if y.rows() != 1 || x.cols() != y.cols() {
            return Err(shape_err("add_row", x, y));
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(y.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(r.0);
        Ok(self.push(v, Op::AddRow(a.0, r.0), rg))
    }

    /// Adds the 1x1 value `s` to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(s));
        if y.shape() != (1, 1) {
            return Err(shape_err("add_scalar", x, y));
        }
        let k = y.item();
        let v = x.map(|p| p + k);
        let rg = self.rg(a.0) || self.rg(s.0);
        Ok(self.push(v, Op::AddScalar(a.0, s.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let v = x.zip_map(y, |p, q| p * q);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    /// Column concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(shape_err("concat", x, y));
        }
        let v = x.hconcat(y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Concat(a.0, b.0), rg))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let v = self.value(a).row_mean();
        let rg = self.rg(a.0);
        self.push(v, Op::RowMean(a.0), rg)
    }

    /// Mean over consecutive row blocks. `offsets` holds block starts plus a
    /// final end marker, so block `k` spans `offsets[k]..offsets[k + 1]`.
    pub fn segment_mean(&mut self, a: Var, offsets: Arc<Vec<usize>>) -> Result<Var, NumericError> {
        let x = self.value(a);
        let ok = offsets.len() >= 2
            && offsets.windows(2).all(|w| w[0] < w[1])
            && offsets[0] == 0
            && *offsets.last().unwrap() == x.rows();
        if !ok {
            return Err(NumericError::Shape {
                op: "segment_mean",
                lhs: x.shape(),
                rhs: (offsets.len(), 1),
            });
        }
        let segs = offsets.len() - 1;
        let mut v = Tensor::zeros(segs, x.cols());
        for k in 0..segs {
            let n = (offsets[k + 1] - offsets[k]) as f64;
            let out = v.row_mut(k);
            for r in offsets[k]..offsets[k + 1] {
                for (o, p) in out.iter_mut().zip(x.row(r)) {
                    *o += p;
                }
            }
            for o in out.iter_mut() {
                *o /= n;
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::SegmentMean(a.0, offsets), rg))
    }

    /// Row `i` of the result is the sum of rows `nbr.lists[i]` of `a`.
    pub fn propagate(&mut self, a: Var, nbr: Arc<Neighbors>) -> Result<Var, NumericError> {
        let x = self.value(a);
        let bad = nbr.lists.len() != x.rows() || nbr.lists.iter().flatten().any(|&j| j as usize >= x.rows());
        if bad {
            return Err(NumericError::Shape {
                op: "propagate",
                lhs: x.shape(),
                rhs: (nbr.lists.len(), 1),
            });
        }
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for (i, list) in nbr.lists.iter().enumerate() {
            for &j in list {
                let src = x.row(j as usize);
                for (o, p) in v.row_mut(i).iter_mut().zip(src) {
                    *o += p;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(v, Op::Propagate(a.0, nbr), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|p| p.max(0.0));
        let rg = self.rg(a.0);
        self.push(v, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|p| 1.0 / (1.0 + (-p).exp()));
        let rg = self.rg(a.0);
        self.push(v, Op::Sigmoid(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(a.0);
        self.push(v, Op::Abs(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|p| p * s);
        let rg = self.rg(a.0);
        self.push(v, Op::Scale(a.0, s), rg)
    }

    /// Sum of all elements as a 1x1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a.0);
        self.push(v, Op::Sum(a.0), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NumericError> {
        let (x, y) = (self.value(pred), self.value(target));
        if x.shape() != y.shape() {
            return Err(shape_err("mse", x, y));
        }
        let n = x.data().len() as f64;
        let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let rg = self.rg(pred.0) || self.rg(target.0);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred.0, target.0), rg))
    }

    /// Gradients of the 1x1 `loss` with respect to every unfrozen parameter
    /// read onto this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumericError::NonScalarLoss(lv.shape()));
        }
        if !lv.is_finite() {
            return Err(NumericError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.entries[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let e = &self.entries[i];
            let send = |j: usize, d: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.entries[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(t) => t.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &e.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.accumulate(Gradients(BTreeMap::from([(name.clone(), g)])));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&self.entries[*a].value, &self.entries[*b].value);
                    if self.rg(*a) {
                        send(*a, g.matmul_t(y), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, x.t_matmul(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|p| -p), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        send(*r, g.row_mean().map(|p| p * g.rows() as f64), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::AddScalar(a, s) => {
                    send(*s, Tensor::scalar(g.sum()), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&self.entries[*a].value, &self.entries[*b].value);
                    if self.rg(*a) {
                        send(*a, g.zip_map(y, |p, q| p * q), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, g.zip_map(x, |p, q| p * q), &mut grads);
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.entries[*a].value.cols();
                    let cb = self.entries[*b].value.cols();
                    let mut ga = Tensor::zeros(g.rows(), ca);
                    let mut gb = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::RowMean(a) => {
                    let n = self.entries[*a].value.rows();
                    let mut ga = Tensor::zeros(n, g.cols());
                    for r in 0..n {
                        for (o, p) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = p / n as f64;
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::SegmentMean(a, offsets) => {
                    let x = &self.entries[*a].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for k in 0..offsets.len() - 1 {
                        let n = (offsets[k + 1] - offsets[k]) as f64;
                        for r in offsets[k]..offsets[k + 1] {
                            for (o, p) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o = p / n;
                            }
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Propagate(a, nbr) => {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for (r, list) in nbr.lists.iter().enumerate() {
                        for &j in list {
                            for (o, p) in ga.row_mut(j as usize).iter_mut().zip(g.row(r)) {
                                *o += p;
                            }
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(&e.value, |p, y| if y > 0.0 { p } else { 0.0 });
                    send(*a, ga, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&e.value, |p, y| p * y * (1.0 - y));
                    send(*a, ga, &mut grads);
                }
                Op::Abs(a) => {
                    let x = &self.entries[*a].value;
                    let ga = g.zip_map(x, |p, v| if v > 0.0 { p } else if v < 0.0 { -p } else { 0.0 });
                    send(*a, ga, &mut grads);
                }
                Op::Scale(a, s) => send(*a, g.map(|p| p * s), &mut grads),
                Op::Sum(a) => {
                    let (r, c) = self.entries[*a].value.shape();
                    send(*a, Tensor::filled(r, c, g.item()), &mut grads);
                }
                Op::Mse(a, b) => {
                    let (x, y) = (&self.entries[*a].value, &self.entries[*b].value);
                    let n = x.data().len() as f64;
                    let k = 2.0 * g.item() / n;
                    let d = x.zip_map(y, |p, q| k * (p - q));
                    send(*b, d.map(|p| -p), &mut grads);
                    send(*a, d, &mut grads);
                }
            }
        }
        Ok(out)
    }
}
