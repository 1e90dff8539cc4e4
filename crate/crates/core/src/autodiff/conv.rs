use rand::Rng;

use super::{Array, Layer, Mode, Tensor};
use crate::{Error, Result};

/// 3×3 convolution over `[batch, time, freq, channels]` input with zero
/// "same" padding and stride 1, so the time and frequency sizes are kept.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[3, 3, in_channels, out_channels]`
    pub kernel: Tensor,
    pub bias: Tensor,
    cache: Option<Array>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            kernel: Tensor::glorot(
                &[3, 3, in_channels, out_channels],
                9 * in_channels,
                9 * out_channels,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            cache: None,
        }
    }

    pub fn from_params(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || bias.shape() != [ks[3]] {
            return Err(Error::shape(format!(
                "conv kernel must be [3,3,cin,cout] with bias [cout], got {:?} / {:?}",
                ks,
                bias.shape()
            )));
        }
        Ok(Self {
            kernel,
            bias,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    fn dims(&self, input: &Array) -> Result<(usize, usize, usize)> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("conv2d expects rank-4 input, got {s:?}")));
        }
        if s[3] != self.in_channels() {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {}",
                self.in_channels(),
                s[3]
            )));
        }
        Ok((s[0], s[1], s[2]))
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Array, _mode: Mode) -> Result<Array> {
        let (batch, time, freq) = self.dims(input)?;
        let cin = self.in_channels();
        let cout = self.out_channels();
        let x = input.data();
        let k = self.kernel.values();
        let mut out = Array::zeros(&[batch, time, freq, cout]);
        let y = out.data_mut();

        for b in 0..batch {
            for t in 0..time {
                for f in 0..freq {
                    let o = ((b * time + t) * freq + f) * cout;
                    let acc = &mut y[o..o + cout];
                    acc.copy_from_slice(self.bias.values());
                    for dt in 0..3 {
                        let Some(tt) = (t + dt).checked_sub(1).filter(|&v| v < time) else {
                            continue;
                        };
                        for df in 0..3 {
                            let Some(ff) = (f + df).checked_sub(1).filter(|&v| v < freq) else {
                                continue;
                            };
                            let xi = ((b * time + tt) * freq + ff) * cin;
                            let kb = (dt * 3 + df) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[xi + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &k[kb + ci * cout..kb + (ci + 1) * cout];
                                for (a, &w) in acc.iter_mut().zip(krow) {
                                    *a += xv * w;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("conv2d backward called before forward"))?;
        let (batch, time, freq) = self.dims(&input)?;
        let cin = self.in_channels();
        let cout = self.out_channels();
        grad_output.expect_shape(&[batch, time, freq, cout], "conv2d grad")?;

        let x = input.data();
        let g = grad_output.data();
        let mut grad_in = Array::zeros(input.shape());
        let gx = grad_in.data_mut();
        let (k, gk) = self.kernel.values_and_grad_mut();
        let gb = self.bias.grad_mut();

        for b in 0..batch {
            for t in 0..time {
                for f in 0..freq {
                    let o = ((b * time + t) * freq + f) * cout;
                    let go = &g[o..o + cout];
                    for (acc, &v) in gb.iter_mut().zip(go) {
                        *acc += v;
                    }
                    for dt in 0..3 {
                        let Some(tt) = (t + dt).checked_sub(1).filter(|&v| v < time) else {
                            continue;
                        };
                        for df in 0..3 {
                            let Some(ff) = (f + df).checked_sub(1).filter(|&v| v < freq) else {
                                continue;
                            };
                            let xi = ((b * time + tt) * freq + ff) * cin;
                            let kb = (dt * 3 + df) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[xi + ci];
                                let r = kb + ci * cout..kb + (ci + 1) * cout;
                                let krow = &k[r.clone()];
                                let mut dx = 0.0;
                                for (&w, &gv) in krow.iter().zip(go) {
                                    dx += w * gv;
                                }
                                gx[xi + ci] += dx;
                                if xv != 0.0 {
                                    for (acc, &gv) in gk[r].iter_mut().zip(go) {
                                        *acc += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kernel: [f64; 9]) -> Conv2d {
        Conv2d::from_params(
            Tensor::from_vec(&[3, 3, 1, 1], kernel.to_vec()).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut conv = single([0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let x = Array::from_vec(&[1, 3, 4, 1], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let y = conv.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut conv = single([1.0; 9]);
        let x = Array::filled(&[1, 4, 4, 1], 1.0);
        let y = conv.forward(&x, Mode::Infer).unwrap();
        let v = |t: usize, f: usize| y.data()[t * 4 + f];
        assert_eq!(v(0, 0), 4.0);
        assert_eq!(v(3, 3), 4.0);
        assert_eq!(v(0, 3), 4.0);
        assert_eq!(v(1, 1), 9.0);
        assert_eq!(v(2, 2), 9.0);
        assert_eq!(v(0, 1), 6.0);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut conv = Conv2d::new(2, 3, &mut rand::rng());
        let x = Array::zeros(&[1, 4, 4, 1]);
        assert!(matches!(conv.forward(&x, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn preserves_time_and_frequency() {
        let mut conv = Conv2d::new(1, 5, &mut rand::rng());
        for t in 1..6 {
            let y = conv.forward(&Array::zeros(&[2, t, 3, 1]), Mode::Infer).unwrap();
            assert_eq!(y.shape(), &[2, t, 3, 5]);
        }
    }
}
