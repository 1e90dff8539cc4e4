//! Hand-written reverse-mode differentiation for the handful of operators
//! the networks are built from.
//!
//! Each operator is a [`Layer`]: `forward` caches whatever `backward` needs,
//! and `backward` takes the gradient of a scalar objective with respect to
//! the layer output, accumulates parameter gradients into the parameters'
//! buffers and returns the gradient with respect to the input. Layers are
//! therefore stateful between a forward and its matching backward and must
//! not be shared across threads during training.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
pub mod gradcheck;
mod gru;
mod loss;
mod pool;
mod tensor;

pub use activation::{sigmoid, Activation, ActivationLayer};
pub use adam::{Adam, AdamConfig};
pub use batchnorm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use conv::Conv2d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use gru::{BiGru, GruCell};
pub use loss::{bce_loss, BCE_CLIP};
pub use pool::MaxPoolFreq;
pub use tensor::{Array, Tensor};

use crate::Result;

/// Whether a forward pass is part of training (batch statistics, dropout
/// masks) or inference (running statistics, identity dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub trait Layer {
    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Array>;

    /// Must follow a `forward` call; uses its cached state.
    fn backward(&mut self, grad_output: &Array) -> Result<Array>;

    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
