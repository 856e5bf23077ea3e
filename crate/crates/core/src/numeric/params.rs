use std::collections::BTreeMap;

use rand::Rng;

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::NumericError;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    /// First and second moment estimates.
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let (r, c) = value.shape();
        Param { value, frozen: false, m: Tensor::zeros(r, c), v: Tensor::zeros(r, c), step: 0 }
    }

    fn reset_state(&mut self) {
        let (r, c) = self.value.shape();
        self.m = Tensor::zeros(r, c);
        self.v = Tensor::zeros(r, c);
        self.step = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named parameters with freeze flags and Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub(crate) fn insert_param(&mut self, name: String, p: Param) {
        self.params.insert(name, p);
    }

    /// Glorot-uniform weight matrix.
    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data).expect("glorot dims are positive"));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), NumericError> {
        let p = self.params.get_mut(name).ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NumericError::Shape { op: "set_value", lhs: p.value.shape(), rhs: value.shape() });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NumericError> {
        let p = self.params.get_mut(name).ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        p.frozen = frozen;
        Ok(())
    }

    /// Sets the freeze flag of every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen_prefix("", true);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    /// Clears Adam state of unfrozen parameters. Frozen ones keep theirs so
    /// their stored bytes stay identical.
    pub fn reset_optimizer(&mut self) {
        for p in self.params.values_mut().filter(|p| !p.frozen) {
            p.reset_state();
        }
    }

    /// One bias-corrected Adam update per parameter that has a gradient.
    pub fn apply(&mut self, grads: &Gradients, opt: &Adam) -> Result<(), NumericError> {
        for name in grads.0.keys() {
            match self.params.get(name) {
                None => return Err(NumericError::UnknownParam(name.clone())),
                Some(p) if p.frozen => return Err(NumericError::FrozenParam(name.clone())),
                Some(p) if p.value.shape() != grads.0[name].shape() => {
                    return Err(NumericError::Shape {
                        op: "adam",
                        lhs: p.value.shape(),
                        rhs: grads.0[name].shape(),
                    })
                }
                Some(_) => {}
            }
            if !grads.0[name].is_finite() {
                return Err(NumericError::NonFinite("gradient"));
            }
        }
        for (name, g) in &grads.0 {
            let p = self.params.get_mut(name).expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            let n = g.data().len();
            for i in 0..n {
                let gi = g.data()[i];
                let m = opt.beta1 * p.m.data()[i] + (1.0 - opt.beta1) * gi;
                let v = opt.beta2 * p.v.data()[i] + (1.0 - opt.beta2) * gi * gi;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let step = opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps);
                p.value.data_mut()[i] -= step;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tape::Tape;

    fn grads(name: &str, g: Tensor) -> Gradients {
        Gradients(BTreeMap::from([(name.to_string(), g)]))
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::filled(1, 2, 0.7));
        s.apply(&grads("w", Tensor::zeros(1, 2)), &Adam::new(0.1)).unwrap();
        assert_eq!(s.get("w").unwrap().value, Tensor::filled(1, 2, 0.7));
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.5));
        let before = 1.5f64 * 1.5;
        s.apply(&grads("w", Tensor::scalar(3.0)), &Adam::new(0.01)).unwrap();
        let w = s.get("w").unwrap().value.item();
        assert!(w * w < before);
        // first bias-corrected step has magnitude lr
        assert!((w - 1.49).abs() < 1e-9);
    }

    #[test]
    fn convex_quadratic_converges() {
        // loss = (a - 3)^2 + 2 (b + 1)^2
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(0.0));
        s.insert("b", Tensor::scalar(0.0));
        let opt = Adam::new(0.1);
        let loss = |s: &ParamStore| {
            let a = s.get("a").unwrap().value.item();
            let b = s.get("b").unwrap().value.item();
            (a - 3.0).powi(2) + 2.0 * (b + 1.0).powi(2)
        };
        for _ in 0..200 {
            let mut t = Tape::new();
            let a = t.param(&s, "a").unwrap();
            let b = t.param(&s, "b").unwrap();
            let three = t.constant(Tensor::scalar(3.0));
            let m1 = t.constant(Tensor::scalar(-1.0));
            let da = t.mse(a, three).unwrap();
            let db = t.mse(b, m1).unwrap();
            let db = t.scale(db, 2.0);
            let l = t.add(da, db).unwrap();
            let g = t.backward(l).unwrap();
            s.apply(&g, &opt).unwrap();
        }
        assert!(loss(&s) < 1e-6, "loss {}", loss(&s));
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(0.25));
        s.insert("b", Tensor::scalar(-0.5));
        s.set_frozen("b", true).unwrap();
        let bits = s.get("b").unwrap().value.item().to_bits();
        for _ in 0..10 {
            let mut t = Tape::new();
            let a = t.param(&s, "a").unwrap();
            let b = t.param(&s, "b").unwrap();
            let p = t.mul(a, b).unwrap();
            let g = t.backward(p).unwrap();
            s.apply(&g, &Adam::new(0.1)).unwrap();
        }
        assert_eq!(s.get("b").unwrap().value.item().to_bits(), bits);
        assert_ne!(s.get("a").unwrap().value.item(), 0.25);
    }

    #[test]
    fn gradient_for_frozen_or_unknown_is_error() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        s.set_frozen("a", true).unwrap();
        let opt = Adam::new(0.1);
        assert!(matches!(s.apply(&grads("a", Tensor::scalar(1.0)), &opt), Err(NumericError::FrozenParam(_))));
        assert!(matches!(s.apply(&grads("z", Tensor::scalar(1.0)), &opt), Err(NumericError::UnknownParam(_))));
    }

    #[test]
    fn step_counts_are_per_parameter() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        s.insert("b", Tensor::scalar(1.0));
        let opt = Adam::new(0.1);
        s.apply(&grads("a", Tensor::scalar(1.0)), &opt).unwrap();
        s.apply(&grads("a", Tensor::scalar(1.0)), &opt).unwrap();
        s.apply(&grads("b", Tensor::scalar(1.0)), &opt).unwrap();
        assert_eq!(s.get("a").unwrap().step, 2);
        assert_eq!(s.get("b").unwrap().step, 1);
        s.reset_optimizer();
        assert_eq!(s.get("a").unwrap().step, 0);
    }
}
