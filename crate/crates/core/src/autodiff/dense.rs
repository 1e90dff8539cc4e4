use rand::Rng;

use super::{Activation, Array, Layer, Mode, Tensor};
use crate::{Error, Result};

/// Fully-connected layer applied to the trailing axis; every leading index
/// (batch, time frame, ...) is transformed independently.
#[derive(Clone, Debug)]
pub struct Dense {
    /// `[in_features, out_features]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    cache: Option<(Array, Array)>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Tensor::glorot(&[in_features, out_features], in_features, out_features, rng),
            bias: Tensor::zeros(&[out_features]),
            activation,
            cache: None,
        }
    }

    pub fn from_params(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(format!(
                "dense weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Layer for Dense {
    fn forward(&mut self, input: &Array, _mode: Mode) -> Result<Array> {
        let din = self.in_features();
        let dout = self.out_features();
        if input.rank() == 0 || input.last_dim() != din {
            return Err(Error::shape(format!(
                "dense expects trailing size {din}, got {:?}",
                input.shape()
            )));
        }
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut out = Array::zeros(&shape);
        let w = self.weight.values();
        for (xrow, yrow) in input
            .data()
            .chunks_exact(din)
            .zip(out.data_mut().chunks_exact_mut(dout))
        {
            yrow.copy_from_slice(self.bias.values());
            for (i, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (y, &wv) in yrow.iter_mut().zip(&w[i * dout..(i + 1) * dout]) {
                    *y += xv * wv;
                }
            }
            for y in yrow.iter_mut() {
                *y = self.activation.apply(*y);
            }
        }
        self.cache = Some((input.clone(), out.clone()));
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        let (input, output) = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("dense backward called before forward"))?;
        grad_output.expect_shape(output.shape(), "dense grad")?;
        let din = self.in_features();
        let dout = self.out_features();
        let act = self.activation;
        let mut grad_in = Array::zeros(input.shape());
        let (w, gw) = self.weight.values_and_grad_mut();
        let gb = self.bias.grad_mut();
        let mut pre = vec![0.0; dout];
        for (((xrow, yrow), grow), gxrow) in input
            .data()
            .chunks_exact(din)
            .zip(output.data().chunks_exact(dout))
            .zip(grad_output.data().chunks_exact(dout))
            .zip(grad_in.data_mut().chunks_exact_mut(din))
        {
            for j in 0..dout {
                pre[j] = grow[j] * act.derivative_from_output(yrow[j]);
                gb[j] += pre[j];
            }
            for i in 0..din {
                let wr = &w[i * dout..(i + 1) * dout];
                let mut acc = 0.0;
                for (&wv, &pv) in wr.iter().zip(&pre) {
                    acc += wv * pv;
                }
                gxrow[i] = acc;
                let xv = xrow[i];
                if xv != 0.0 {
                    for (g, &pv) in gw[i * dout..(i + 1) * dout].iter_mut().zip(&pre) {
                        *g += xv * pv;
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}
