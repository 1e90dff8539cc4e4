use std::fmt;
use std::str::FromStr;

use super::SedModel;
use crate::autodiff::{Array, Mode};
use crate::features::FeatureMatrix;
use crate::{Error, Result};

/// Which output a saliency map is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Strong,
    Weak,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Strong => "strong",
            Head::Weak => "weak",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Head::Strong),
            "weak" => Ok(Head::Weak),
            _ => Err(Error::invalid(format!("unknown head `{s}` (strong|weak)"))),
        }
    }
}

/// Absolute gradient of one class output with respect to the input
/// features, in inference mode. For the strong head the output is summed
/// over all frames first. Returns a `[T, F]` map.
pub fn saliency<M: SedModel + ?Sized>(
    model: &mut M,
    features: &FeatureMatrix,
    class: usize,
    head: Head,
) -> Result<Array> {
    let c = model.num_classes();
    if class >= c {
        return Err(Error::invalid(format!("class index {class} out of range for {c} classes")));
    }
    if features.bands() != model.input_bands() {
        return Err(Error::shape(format!(
            "model expects {} bands, features have {}",
            model.input_bands(),
            features.bands()
        )));
    }
    let t = features.frames();
    let pred = model.forward(&features.to_batch(), Mode::Infer)?;
    let mut grad_strong = Array::zeros(pred.strong.shape());
    let grad_weak = match head {
        Head::Strong => {
            for frame in grad_strong.data_mut().chunks_exact_mut(c) {
                frame[class] = 1.0;
            }
            None
        }
        Head::Weak => {
            let weak = pred
                .weak
                .ok_or_else(|| Error::invalid("this model has no weak head"))?;
            let mut g = Array::zeros(weak.shape());
            g.data_mut()[class] = 1.0;
            Some(g)
        }
    };
    let grad = model.backward(&grad_strong, grad_weak.as_ref())?;
    model.zero_grad();
    grad.map(f64::abs).reshape(&[t, features.bands()])
}
