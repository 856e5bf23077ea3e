//! Label scaling: FLOPs-aware transform followed by standardization.
//!
//! Metrics are percentages. With the transform enabled a label `y` on a
//! graph of `F` GigaFLOPs becomes `y / (log10(F + 1) + 1)` before z-scoring.

use serde::{Deserialize, Serialize};

use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScalingError {
    #[error("FLOPs must be non-negative, got {0}")]
    NegativeFlops(f64),
    #[error("need at least 2 labels to fit scaling, got {0}")]
    TooFew(usize),
    #[error("labels are constant after transform; standard deviation is zero")]
    Constant,
    #[error("non-finite label or FLOPs value")]
    NonFinite,
}

/// `y / (log10(F + 1) + 1)`.
pub fn flops_transform(y: f64, gflops: f64) -> Result<f64, ScalingError> {
    Ok(y / flops_divisor(gflops)?)
}

fn flops_divisor(gflops: f64) -> Result<f64, ScalingError> {
    if !gflops.is_finite() {
        return Err(ScalingError::NonFinite);
    }
    if gflops < 0.0 {
        return Err(ScalingError::NegativeFlops(gflops));
    }
    Ok((gflops + 1.0).log10() + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub task: String,
    pub use_flops_transform: bool,
    pub mu: f64,
    pub sigma: f64,
}

/// Fits standardization parameters on `(label, gflops)` records.
pub fn fit_scaling(task: &str, records: &[(f64, f64)], use_flops_transform: bool) -> Result<ScalingSpec, ScalingError> {
    if records.len() < 2 {
        return Err(ScalingError::TooFew(records.len()));
    }
    let mut t = Vec::with_capacity(records.len());
    for &(y, f) in records {
        if !y.is_finite() {
            return Err(ScalingError::NonFinite);
        }
        t.push(if use_flops_transform { flops_transform(y, f)? } else { y });
    }
    let (mu, sigma) = mean_std(&t).expect("non-empty");
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(ScalingError::Constant);
    }
    Ok(ScalingSpec { task: task.to_string(), use_flops_transform, mu, sigma })
}

impl ScalingSpec {
    fn divisor(&self, gflops: f64) -> Result<f64, ScalingError> {
        if self.use_flops_transform {
            flops_divisor(gflops)
        } else {
            Ok(1.0)
        }
    }

    /// Label to standardized score.
    pub fn apply(&self, y: f64, gflops: f64) -> Result<f64, ScalingError> {
        Ok((y / self.divisor(gflops)? - self.mu) / self.sigma)
    }

    /// Standardized score back to the metric scale.
    pub fn invert(&self, z: f64, gflops: f64) -> Result<f64, ScalingError> {
        Ok((z * self.sigma + self.mu) * self.divisor(gflops)?)
    }

    /// Metric change corresponding to one standardized unit at `gflops`.
    pub fn metric_per_unit(&self, gflops: f64) -> Result<f64, ScalingError> {
        Ok(self.sigma * self.divisor(gflops)?)
    }
}
