//! Network definitions.
//!
//! [`Crnn`] is the stacked convolutional-recurrent network with a strong
//! (per-frame) head followed by a weak (per-clip) head computed from the
//! strong head's pre-sigmoid activations. [`BaselineMlp`] is the
//! frame-context MLP comparison system. Both implement [`SedModel`].

mod baseline;
mod checkpoint;
mod crnn;
mod saliency;

pub use baseline::{BaselineConfig, BaselineMlp};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use crnn::{collapse_time, expand_time_grad, ConvSpec, Crnn, ModelConfig};
pub use saliency::{saliency, Head};

use crate::autodiff::{Array, Mode, Tensor};
use crate::features::FeatureMatrix;
use crate::{Error, Result};

/// Probabilities produced by a forward pass over `[B, T, F]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[B, T, C]`
    pub strong: Array,
    /// `[B, C]`, absent for models without a clip-level head.
    pub weak: Option<Array>,
}

pub trait SedModel {
    fn num_classes(&self) -> usize;

    fn input_bands(&self) -> usize;

    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Prediction>;

    /// Backpropagates output gradients from the last forward pass and
    /// returns the gradient with respect to the `[B, T, F]` input.
    fn backward(&mut self, grad_strong: &Array, grad_weak: Option<&Array>) -> Result<Array>;

    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Architecture description plus every parameter and running statistic.
    fn to_checkpoint(&self) -> Checkpoint;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars.
    fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Inference on a single clip: `[T, C]` strong and `[C]` weak output.
    fn predict(&mut self, features: &FeatureMatrix) -> Result<(Array, Option<Array>)> {
        if features.bands() != self.input_bands() {
            return Err(Error::shape(format!(
                "model expects {} bands, features have {}",
                self.input_bands(),
                features.bands()
            )));
        }
        let pred = self.forward(&features.to_batch(), Mode::Infer)?;
        let c = self.num_classes();
        let strong = pred.strong.reshape(&[features.frames(), c])?;
        let weak = pred.weak.map(|w| w.reshape(&[c])).transpose()?;
        Ok((strong, weak))
    }
}

/// Either network, as restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Crnn(Crnn),
    Baseline(BaselineMlp),
}

impl AnyModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.config.get("model") {
            Some("crnn") => Ok(AnyModel::Crnn(Crnn::from_checkpoint(ckpt)?)),
            Some("baseline") => Ok(AnyModel::Baseline(BaselineMlp::from_checkpoint(ckpt)?)),
            Some(other) => Err(Error::Format(format!("unknown model kind `{other}`"))),
            None => Err(Error::Format("checkpoint does not name a model kind".into())),
        }
    }

    fn inner(&self) -> &dyn SedModel {
        match self {
            AnyModel::Crnn(m) => m,
            AnyModel::Baseline(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn SedModel {
        match self {
            AnyModel::Crnn(m) => m,
            AnyModel::Baseline(m) => m,
        }
    }
}

impl SedModel for AnyModel {
    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn input_bands(&self) -> usize {
        self.inner().input_bands()
    }

    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Prediction> {
        self.inner_mut().forward(input, mode)
    }

    fn backward(&mut self, grad_strong: &Array, grad_weak: Option<&Array>) -> Result<Array> {
        self.inner_mut().backward(grad_strong, grad_weak)
    }

    fn params(&self) -> Vec<&Tensor> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner_mut().params_mut()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        self.inner().to_checkpoint()
    }
}
