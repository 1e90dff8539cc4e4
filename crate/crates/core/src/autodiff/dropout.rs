use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Layer, Mode};
use crate::{Error, Result};

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; inference is the
/// identity and never draws random numbers.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Layer for Dropout {
    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Array> {
        if mode == Mode::Infer || self.rate == 0.0 {
            self.mask = None;
            return Ok(input.clone());
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..input.len())
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.mask = Some(mask);
        Array::from_vec(input.shape(), data)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        match self.mask.take() {
            None => Ok(grad_output.clone()),
            Some(mask) => {
                if mask.len() != grad_output.len() {
                    return Err(Error::shape("dropout grad does not match the last forward"));
                }
                let data = grad_output.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
                Array::from_vec(grad_output.shape(), data)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_and_inference_are_identity() {
        let x = Array::from_vec(&[5], vec![1., 2., 3., 4., 5.]).unwrap();
        let mut d0 = Dropout::new(0.0, 1).unwrap();
        assert_eq!(d0.forward(&x, Mode::Train).unwrap(), x);
        let mut d = Dropout::new(0.75, 1).unwrap();
        assert_eq!(d.forward(&x, Mode::Infer).unwrap(), x);
    }

    #[test]
    fn rejects_rate_one() {
        assert!(Dropout::new(1.0, 0).is_err());
        assert!(Dropout::new(-0.1, 0).is_err());
    }

    #[test]
    fn inference_consumes_no_randomness() {
        let x = Array::filled(&[64], 1.0);
        let mut a = Dropout::new(0.5, 9).unwrap();
        let mut b = Dropout::new(0.5, 9).unwrap();
        a.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.forward(&x, Mode::Train).unwrap(), b.forward(&x, Mode::Train).unwrap());
    }

    #[test]
    fn expectation_is_preserved() {
        // Mean of 20k unit inputs after rate-0.5 dropout; each output is 0 or
        // 2, so the sample mean has std 1/sqrt(n).
        let n = 20_000;
        let x = Array::filled(&[n], 1.0);
        let sigma = 1.0 / (n as f64).sqrt();
        for seed in 0..10 {
            let mut d = Dropout::new(0.5, seed).unwrap();
            let mean = d.forward(&x, Mode::Train).unwrap().sum() / n as f64;
            assert!((mean - 1.0).abs() < 3.0 * sigma, "seed {seed}: {mean}");
        }
    }

    #[test]
    fn backward_reuses_mask() {
        let x = Array::filled(&[100], 1.0);
        let mut d = Dropout::new(0.3, 4).unwrap();
        let y = d.forward(&x, Mode::Train).unwrap();
        let g = d.backward(&x).unwrap();
        assert_eq!(y, g);
    }
}
