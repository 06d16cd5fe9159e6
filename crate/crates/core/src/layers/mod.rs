//! Differentiable layers with hand-written forward and backward passes.
//!
//! Every layer caches what its backward pass needs during a train-mode
//! forward. Inference goes through [`Layer::infer`], which borrows the layer
//! immutably and never touches caches or running statistics.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::Relu;
pub use batchnorm::{BatchNorm1d, BN_EPSILON, BN_MOMENTUM};
pub use conv::Conv1d;
pub use linear::Linear;
pub use loss::{softmax_xent, softmax_xent_backward, XentOutput};
pub use pool::{Flatten, GlobalAvgPool1d, MaxPool1d};

use std::any::Any;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv1d,
    BatchNorm1d,
    Relu,
    MaxPool1d,
    GlobalAvgPool1d,
    Flatten,
    Linear,
    BasicBlock,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv1d => "conv1d",
            LayerKind::BatchNorm1d => "batchnorm1d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool1d => "maxpool1d",
            LayerKind::GlobalAvgPool1d => "global_avgpool1d",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear => "linear",
            LayerKind::BasicBlock => "basic_block",
        }
    }
}

/// Visitor over named tensors; names are dot-joined paths such as `stage2.block0.conv1.weight`.
pub type Visit<'a, T> = dyn FnMut(&str, &Tensor<T>) + 'a;
pub type VisitMut<'a, T> = dyn FnMut(&str, &mut Tensor<T>) + 'a;

pub trait Layer<T: Scalar>: Send + Sync {
    fn kind(&self) -> LayerKind;

    /// Train-mode forward; caches state for [`Layer::backward`].
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Infer-mode forward. Pure with respect to the layer.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn clear_cache(&mut self);

    fn as_any_mut(&mut self) -> &mut dyn Any;

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Infer => {
                self.clear_cache();
                self.infer(x)
            }
        }
    }

    /// Trainable parameters.
    fn params(&self, _prefix: &str, _f: &mut Visit<'_, T>) {}
    fn params_mut(&mut self, _prefix: &str, _f: &mut VisitMut<'_, T>) {}

    /// Non-trainable state (batch-norm running statistics).
    fn buffers(&self, _prefix: &str, _f: &mut Visit<'_, T>) {}
    fn buffers_mut(&mut self, _prefix: &str, _f: &mut VisitMut<'_, T>) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `L_out = floor((L + 2p - K) / s) + 1`, or `None` when the window does not fit.
pub fn output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || len + 2 * padding < kernel {
        return None;
    }
    Some((len + 2 * padding - kernel) / stride + 1)
}

/// Uniform `[-bound, bound]` tensor sampled in `f64`, so `f32` and `f64`
/// builds from the same seed agree up to rounding.
pub fn uniform_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_f64(shape, &data).expect("init shape is valid")
}

pub(crate) fn expect_shape<T: Scalar>(op: &'static str, t: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_formula() {
        assert_eq!(output_len(178, 7, 2, 3), Some(89));
        assert_eq!(output_len(89, 3, 2, 1), Some(45));
        assert_eq!(output_len(45, 3, 2, 1), Some(23));
        assert_eq!(output_len(23, 3, 2, 1), Some(12));
        assert_eq!(output_len(12, 3, 2, 1), Some(6));
        assert_eq!(output_len(2, 3, 1, 0), None);
        assert_eq!(output_len(5, 3, 0, 0), None);
    }
}
