//! Central finite-difference verification of analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    bce_loss, Activation, ActivationLayer, Array, BatchNorm, BiGru, Conv2d, Dense, Layer,
    MaxPoolFreq, Mode, Tensor,
};
use crate::train::combined_loss;
use crate::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, SCALE_FLOOR)`
/// so that gradients that are zero up to rounding do not divide by zero.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

fn projected(out: &Array, proj: &Array) -> f64 {
    out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Checks a layer against finite differences of `L = Σ proj ⊙ layer(x)` with
/// a random projection. Both the input gradient and every parameter
/// gradient are compared; the worst relative error is returned.
///
/// Layers that draw random numbers in `mode` (dropout in training) cannot
/// be checked this way.
pub fn check_layer<L: Layer + ?Sized>(layer: &mut L, input: &Array, mode: Mode, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    layer.zero_grad();
    let out = layer.forward(input, mode)?;
    let proj = Array::random_uniform(out.shape(), -1.0, 1.0, &mut rng);
    let grad_in = layer.backward(&proj)?;
    let param_grads: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad().to_vec()).collect();

    let objective = |layer: &mut L, x: &Array| -> Result<f64> {
        Ok(projected(&layer.forward(x, mode)?, &proj))
    };

    let mut worst = 0.0f64;
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let plus = objective(layer, &x)?;
        x.data_mut()[i] = orig - FD_STEP;
        let minus = objective(layer, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad_in.data()[i], numeric));
    }

    for (pi, analytic) in param_grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = layer.params()[pi].values()[i];
            layer.params_mut()[pi].values_mut()[i] = orig + FD_STEP;
            let plus = objective(layer, input)?;
            layer.params_mut()[pi].values_mut()[i] = orig - FD_STEP;
            let minus = objective(layer, input)?;
            layer.params_mut()[pi].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Checks a scalar function that returns its own gradient.
pub fn check_fn(mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>, x: &[f64]) -> Result<f64> {
    let (_, analytic) = f(x)?;
    if analytic.len() != x.len() {
        return Err(Error::shape("gradient length differs from input length"));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let plus = f(&probe)?.0;
        probe[i] = x[i] - FD_STEP;
        let minus = f(&probe)?.0;
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

/// Wraps a layer and inflates its largest gradient entry by 10% after every
/// backward pass. Used to confirm the checker notices broken backward code.
pub struct Corrupted<L> {
    pub inner: L,
}

fn inflate_largest(values: &mut [f64]) {
    if let Some((idx, _)) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
    {
        values[idx] *= 1.1;
    }
}

impl<L: Layer> Layer for Corrupted<L> {
    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Array> {
        self.inner.forward(input, mode)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        let mut grad = self.inner.backward(grad_output)?;
        match self.inner.params_mut().into_iter().next() {
            Some(p) => inflate_largest(p.grad_mut()),
            None => inflate_largest(grad.data_mut()),
        }
        Ok(grad)
    }

    fn params(&self) -> Vec<&Tensor> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner.params_mut()
    }
}

/// The differentiable operators covered by the gradient-check suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operator {
    Conv2d,
    MaxPoolFreq,
    BatchNorm,
    Dense,
    BiGru,
    Sigmoid,
    Tanh,
    Relu,
    BceLoss,
    CombinedLoss,
}

impl Operator {
    pub const ALL: [Operator; 10] = [
        Operator::Conv2d,
        Operator::MaxPoolFreq,
        Operator::BatchNorm,
        Operator::Dense,
        Operator::BiGru,
        Operator::Sigmoid,
        Operator::Tanh,
        Operator::Relu,
        Operator::BceLoss,
        Operator::CombinedLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Conv2d => "conv2d",
            Operator::MaxPoolFreq => "maxpool_freq",
            Operator::BatchNorm => "batch_norm",
            Operator::Dense => "dense",
            Operator::BiGru => "bigru",
            Operator::Sigmoid => "sigmoid",
            Operator::Tanh => "tanh",
            Operator::Relu => "relu",
            Operator::BceLoss => "bce_loss",
            Operator::CombinedLoss => "combined_loss",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operator `{s}`")))
    }
}

fn run_layer<L: Layer>(layer: L, input: &Array, mode: Mode, seed: u64, fault: bool) -> Result<f64> {
    if fault {
        check_layer(&mut Corrupted { inner: layer }, input, mode, seed)
    } else {
        let mut layer = layer;
        check_layer(&mut layer, input, mode, seed)
    }
}

/// Inputs whose entries are pairwise at least 0.05 apart, so a finite
/// difference step never reorders them (no argmax or kink crossings).
fn separated_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.025).collect();
    vals.shuffle(rng);
    Array::from_vec(shape, vals).expect("shape product matches")
}

fn maybe_corrupt(mut grad: Vec<f64>, fault: bool) -> Vec<f64> {
    if fault {
        inflate_largest(&mut grad);
    }
    grad
}

/// Checks one operator on a randomly drawn small instance.
pub fn check_operator(op: Operator, seed: u64, fault: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        Operator::Conv2d => {
            let mut conv = Conv2d::new(2, 3, &mut rng);
            for v in conv.bias.values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = Array::random_uniform(&[2, 4, 5, 2], -1.0, 1.0, &mut rng);
            run_layer(conv, &x, Mode::Train, seed, fault)
        }
        Operator::MaxPoolFreq => {
            let x = separated_values(&[2, 3, 6, 2], &mut rng);
            run_layer(MaxPoolFreq::new(3)?, &x, Mode::Train, seed, fault)
        }
        Operator::BatchNorm => {
            let mut bn = BatchNorm::new(3);
            for v in bn.gamma.values_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            for v in bn.beta.values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = Array::random_uniform(&[2, 3, 4, 3], -2.0, 2.0, &mut rng);
            run_layer(bn, &x, Mode::Train, seed, fault)
        }
        Operator::Dense => {
            let mut d = Dense::new(4, 3, Activation::Sigmoid, &mut rng);
            for v in d.bias.values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = Array::random_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
            run_layer(d, &x, Mode::Train, seed, fault)
        }
        Operator::BiGru => {
            let mut gru = BiGru::new(3, 4, &mut rng);
            for p in gru.params_mut() {
                if p.shape().len() == 1 {
                    for v in p.values_mut() {
                        *v = rng.random_range(-0.5..0.5);
                    }
                }
            }
            let x = Array::random_uniform(&[2, 5, 3], -1.0, 1.0, &mut rng);
            run_layer(gru, &x, Mode::Train, seed, fault)
        }
        Operator::Sigmoid | Operator::Tanh => {
            let act = if op == Operator::Sigmoid {
                Activation::Sigmoid
            } else {
                Activation::Tanh
            };
            let x = Array::random_uniform(&[3, 4], -3.0, 3.0, &mut rng);
            run_layer(ActivationLayer::new(act), &x, Mode::Train, seed, fault)
        }
        Operator::Relu => {
            let x = separated_values(&[3, 4], &mut rng);
            run_layer(ActivationLayer::new(Activation::Relu), &x, Mode::Train, seed, fault)
        }
        Operator::BceLoss => {
            let shape = [3, 5];
            let pred = Array::random_uniform(&shape, 0.05, 0.95, &mut rng);
            let target = Array::from_vec(
                &shape,
                (0..15).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
            )?;
            check_fn(
                |p| {
                    let (loss, grad) = bce_loss(&Array::from_vec(&shape, p.to_vec())?, &target)?;
                    Ok((loss, maybe_corrupt(grad.into_vec(), fault)))
                },
                pred.data(),
            )
        }
        Operator::CombinedLoss => {
            let (t, c) = (4, 3);
            let strong = Array::random_uniform(&[t, c], 0.05, 0.95, &mut rng);
            let weak = Array::random_uniform(&[c], 0.05, 0.95, &mut rng);
            let weak_target =
                Array::from_vec(&[c], (0..c).map(|_| f64::from(rng.random::<bool>() as u8)).collect())?;
            let strong_target = crate::train::replicate_weak_to_strong(&weak_target, t)?;
            let ws = rng.random_range(0.001..2.0);
            let ww = rng.random_range(0.001..2.0);
            let mut joined = strong.data().to_vec();
            joined.extend_from_slice(weak.data());
            check_fn(
                |v| {
                    let sp = Array::from_vec(&[t, c], v[..t * c].to_vec())?;
                    let wp = Array::from_vec(&[c], v[t * c..].to_vec())?;
                    let out = combined_loss(&sp, &strong_target, Some((&wp, &weak_target)), ws, ww)?;
                    let mut grad = out.grad_strong.into_vec();
                    grad.extend(out.grad_weak.expect("weak head present").into_vec());
                    Ok((out.total, maybe_corrupt(grad, fault)))
                },
                &joined,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorReport {
    pub operator: Operator,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl OperatorReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Runs every operator over `seeds` consecutive seeds starting at
/// `base_seed`. `fault` names an operator whose backward is corrupted.
pub fn run_suite(base_seed: u64, seeds: usize, fault: Option<Operator>) -> Result<Vec<OperatorReport>> {
    Operator::ALL
        .into_iter()
        .map(|op| {
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                let err = check_operator(op, base_seed.wrapping_add(s), fault == Some(op))?;
                worst = worst.max(err);
            }
            Ok(OperatorReport {
                operator: op,
                seeds,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_dense_is_essentially_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut d = Dense::new(5, 4, Activation::Linear, &mut rng);
        let x = Array::random_uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let err = check_layer(&mut d, &x, Mode::Train, 1).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn batch_norm_infer_mode_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm::new(2);
        bn.running_mean = vec![0.3, -0.2];
        bn.running_var = vec![1.7, 0.4];
        let x = Array::random_uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
        assert!(check_layer(&mut bn, &x, Mode::Infer, 2).unwrap() < TOLERANCE);
    }

    #[test]
    fn every_operator_passes_on_a_few_seeds() {
        for r in run_suite(100, 3, None).unwrap() {
            assert!(r.passed(), "{} failed with {}", r.operator, r.max_rel_error);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        for op in Operator::ALL {
            let err = check_operator(op, 7, true).unwrap();
            assert!(err > 1e-2, "{op}: corrupted backward only gave {err}");
        }
    }

    #[test]
    fn operator_names_round_trip() {
        for op in Operator::ALL {
            assert_eq!(op.name().parse::<Operator>().unwrap(), op);
        }
        assert!("softmax".parse::<Operator>().is_err());
    }
}
