//! Dense tensors with reverse-mode differentiation.
//!
//! [`ops`] holds the pure forward kernels; [`Tape`] records them and replays
//! the adjoints in reverse order.

pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Running statistics of a batch-norm layer, used in inference mode.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], momentum: 0.1, eps: 1e-5 }
    }

    /// Folds a training batch `x[N,D]` into the running averages
    /// (unbiased variance).
    pub fn update(&mut self, x: &Tensor) -> Result<()> {
        let (mean, var) = ops::batch_moments(x)?;
        if mean.len() != self.mean.len() {
            return Err(Error::InvalidShape("batch-norm stats width mismatch".into()));
        }
        let n = x.shape()[0] as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for j in 0..mean.len() {
            self.mean[j] = (1.0 - m) * self.mean[j] + m * mean[j];
            self.var[j] = (1.0 - m) * self.var[j] + m * var[j] * correction;
        }
        Ok(())
    }

    /// Inference-mode normalization of `x[N,D]` with the running statistics.
    pub fn apply(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.rank() != 2 || x.shape()[1] != d || gamma.numel() != d || beta.numel() != d {
            return Err(Error::InvalidShape("batch-norm inference shape mismatch".into()));
        }
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            for j in 0..d {
                let h = (row[j] - self.mean[j]) / math::sqrt(self.var[j] + self.eps);
                row[j] = gamma.data()[j] * h + beta.data()[j];
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}
