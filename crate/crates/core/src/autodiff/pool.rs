use super::{Array, Layer, Mode};
use crate::{Error, Result};

/// Max-pooling along the frequency axis only of a `[batch, time, freq,
/// channels]` array. The time axis is never pooled.
#[derive(Clone, Debug)]
pub struct MaxPoolFreq {
    factor: usize,
    // Flat input index of the winner for every output element.
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

impl MaxPoolFreq {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("pool factor must be at least 1"));
        }
        Ok(Self {
            factor,
            argmax: Vec::new(),
            input_shape: Vec::new(),
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

impl Layer for MaxPoolFreq {
    fn forward(&mut self, input: &Array, _mode: Mode) -> Result<Array> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("maxpool expects rank-4 input, got {s:?}")));
        }
        let (batch, time, freq, ch) = (s[0], s[1], s[2], s[3]);
        if freq % self.factor != 0 {
            return Err(Error::shape(format!(
                "frequency size {freq} is not divisible by pool factor {}",
                self.factor
            )));
        }
        let out_freq = freq / self.factor;
        let mut out = Array::zeros(&[batch, time, out_freq, ch]);
        let mut argmax = vec![0usize; out.len()];
        let x = input.data();
        let y = out.data_mut();
        for bt in 0..batch * time {
            for of in 0..out_freq {
                for c in 0..ch {
                    let oi = (bt * out_freq + of) * ch + c;
                    let mut best_idx = (bt * freq + of * self.factor) * ch + c;
                    let mut best = x[best_idx];
                    for j in 1..self.factor {
                        let idx = (bt * freq + of * self.factor + j) * ch + c;
                        // strict comparison keeps the first maximum on ties
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    y[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
        self.argmax = argmax;
        self.input_shape = s.to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        if grad_output.len() != self.argmax.len() {
            return Err(Error::shape("maxpool grad does not match the last forward"));
        }
        let mut grad_in = Array::zeros(&self.input_shape);
        let gx = grad_in.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad_output.data()) {
            gx[idx] += g;
        }
        Ok(grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_max() {
        let mut pool = MaxPoolFreq::new(2).unwrap();
        let x = Array::from_vec(&[1, 1, 4, 1], vec![1., 3., 2., 2.]).unwrap();
        let y = pool.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 1]);
        assert_eq!(y.data(), &[3., 2.]);
    }

    #[test]
    fn factor_one_is_identity() {
        let mut pool = MaxPoolFreq::new(1).unwrap();
        let x = Array::from_vec(&[1, 2, 3, 2], (0..12).map(|v| (v * 7 % 5) as f64).collect()).unwrap();
        assert_eq!(pool.forward(&x, Mode::Infer).unwrap(), x);
    }

    #[test]
    fn ties_route_gradient_to_first() {
        let mut pool = MaxPoolFreq::new(2).unwrap();
        let x = Array::from_vec(&[1, 1, 2, 1], vec![5., 5.]).unwrap();
        pool.forward(&x, Mode::Train).unwrap();
        let g = pool.backward(&Array::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_indivisible_frequency() {
        let mut pool = MaxPoolFreq::new(3).unwrap();
        assert!(matches!(
            pool.forward(&Array::zeros(&[1, 2, 4, 1]), Mode::Train),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn time_axis_untouched() {
        let mut pool = MaxPoolFreq::new(4).unwrap();
        let y = pool.forward(&Array::zeros(&[3, 17, 8, 2]), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[3, 17, 2, 2]);
    }
}
