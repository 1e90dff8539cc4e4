use std::fmt;
use std::str::FromStr;

use super::{Array, Layer, Mode};
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Linear => "linear",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Elementwise activation as a standalone layer.
#[derive(Clone, Debug)]
pub struct ActivationLayer {
    activation: Activation,
    output: Option<Array>,
}

impl ActivationLayer {
    pub fn new(activation: Activation) -> Self {
        Self {
            activation,
            output: None,
        }
    }
}

impl Layer for ActivationLayer {
    fn forward(&mut self, input: &Array, _mode: Mode) -> Result<Array> {
        let act = self.activation;
        let out = input.map(|v| act.apply(v));
        self.output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        let out = self
            .output
            .take()
            .ok_or_else(|| Error::invalid("activation backward called before forward"))?;
        grad_output.expect_shape(out.shape(), "activation grad")?;
        let act = self.activation;
        let data = out
            .data()
            .iter()
            .zip(grad_output.data())
            .map(|(&y, &g)| g * act.derivative_from_output(y))
            .collect();
        Array::from_vec(out.shape(), data)
    }
}
