use super::{Array, Layer, Mode, Tensor};
use crate::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Batch normalization over the trailing (channel) axis. Statistics are
/// taken per channel over every other axis, i.e. batch × time × frequency
/// for convolutional activations.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Array> {
        let ch = self.channels();
        if input.last_dim() != ch || input.rank() == 0 {
            return Err(Error::shape(format!(
                "batch norm over {ch} channels got input {:?}",
                input.shape()
            )));
        }
        let x = input.data();
        let count = x.len() / ch;
        if count == 0 {
            return Err(Error::shape("batch norm over an empty input"));
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; ch];
                for row in x.chunks_exact(ch) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; ch];
                for row in x.chunks_exact(ch) {
                    for c in 0..ch {
                        let d = row[c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                for c in 0..ch {
                    self.running_mean[c] =
                        BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                    self.running_var[c] =
                        BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
                }
                (mean, var)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let gamma = self.gamma.values();
        let beta = self.beta.values();
        let mut normalized = vec![0.0; x.len()];
        let mut out = Array::zeros(input.shape());
        for ((row, nrow), orow) in x
            .chunks_exact(ch)
            .zip(normalized.chunks_exact_mut(ch))
            .zip(out.data_mut().chunks_exact_mut(ch))
        {
            for c in 0..ch {
                let n = (row[c] - mean[c]) * inv_std[c];
                nrow[c] = n;
                orow[c] = gamma[c] * n + beta[c];
            }
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            shape: input.shape().to_vec(),
            mode,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("batch norm backward called before forward"))?;
        grad_output.expect_shape(&cache.shape, "batch norm grad")?;
        let ch = self.channels();
        let g = grad_output.data();
        let count = (g.len() / ch) as f64;

        let mut sum_g = vec![0.0; ch];
        let mut sum_gn = vec![0.0; ch];
        for (grow, nrow) in g.chunks_exact(ch).zip(cache.normalized.chunks_exact(ch)) {
            for c in 0..ch {
                sum_g[c] += grow[c];
                sum_gn[c] += grow[c] * nrow[c];
            }
        }
        for (acc, v) in self.beta.grad_mut().iter_mut().zip(&sum_g) {
            *acc += v;
        }
        for (acc, v) in self.gamma.grad_mut().iter_mut().zip(&sum_gn) {
            *acc += v;
        }

        let gamma = self.gamma.values();
        let mut grad_in = Array::zeros(&cache.shape);
        for ((grow, nrow), xrow) in g
            .chunks_exact(ch)
            .zip(cache.normalized.chunks_exact(ch))
            .zip(grad_in.data_mut().chunks_exact_mut(ch))
        {
            for c in 0..ch {
                let scale = gamma[c] * cache.inv_std[c];
                xrow[c] = match cache.mode {
                    // batch statistics depend on every element of the channel
                    Mode::Train => {
                        scale * (grow[c] - sum_g[c] / count - nrow[c] * sum_gn[c] / count)
                    }
                    Mode::Infer => scale * grow[c],
                };
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNorm::new(2);
        bn.beta.values_mut().copy_from_slice(&[0.3, -1.5]);
        bn.gamma.values_mut().copy_from_slice(&[2.0, 4.0]);
        let x = Array::from_vec(&[3, 2], vec![7.0, 1.0, 7.0, 1.0, 7.0, 1.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.3, -1.5]);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::new(3);
        let x = Array::random_uniform(&[4, 50, 3], -2.0, 5.0, &mut rng);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn infer_uses_running_statistics() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0 - BN_EPSILON;
        let x = Array::from_vec(&[2, 1], vec![2.0, 6.0]).unwrap();
        let y = bn.forward(&x, Mode::Infer).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
        // inference never touches the running statistics
        assert_eq!(bn.running_mean[0], 2.0);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::new(1);
        let x = Array::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.02).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.99 + 0.01)).abs() < 1e-12);
    }
}
