//! Minimal trainable-network substrate: parameters, layers with explicit
//! backward passes, and an Adam optimizer.
//!
//! Everything here is single-threaded and allocation-order deterministic, so
//! two runs with the same seed produce bit-identical parameters. Convolutions
//! lower to a transposed im2col followed by one GEMM per layer call.

mod adam;
mod layers;
mod ops;

pub use adam::Adam;
pub use layers::{Conv2d, ConvCache, GroupNorm, GroupNormCache, Linear, LinearCache};
pub use ops::*;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// A named trainable tensor with its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub(crate) m: ArrayD<f32>,
    pub(crate) v: ArrayD<f32>,
}

impl Param {
    /// Zero-valued parameter of the given shape.
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::from_value(name, ArrayD::zeros(shape))
    }

    pub fn from_value(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            m,
            v,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Replace the value, keeping optimizer state shape-consistent.
    pub fn load(&mut self, value: ArrayD<f32>) -> crate::Result<()> {
        if value.shape() != self.value.shape() {
            return Err(crate::Error::shape(
                format!("param `{}`", self.name),
                format!("{:?}", self.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }
}

/// Uniform init in [-s, s] with s = 1/sqrt(fan_in), PyTorch-style.
pub fn uniform_fan_in(rng: &mut ChaCha20Rng, name: &str, shape: &[usize], fan_in: usize) -> Param {
    let s = 1.0 / (fan_in as f32).sqrt();
    Param::from_value(name, ArrayD::from_shape_fn(shape, |_| rng.gen_range(-s..=s)))
}
