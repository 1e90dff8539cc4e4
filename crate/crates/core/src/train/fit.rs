use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{combined_loss, replicate_weak_to_strong};
use crate::autodiff::{Adam, AdamConfig, Array, Mode};
use crate::dataset::Example;
use crate::metrics::{evaluate_split, Prf};
use crate::model::SedModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strong_weight: f64,
    pub weak_weight: f64,
    pub max_epochs: usize,
    /// Epochs without improvement tolerated before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Used when building the model; recorded here so a run is described
    /// by one config.
    pub dropout: f64,
    pub lr: f64,
    pub seed: u64,
    pub metric_segment_s: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strong_weight: 1.0,
            weak_weight: 1.0,
            max_epochs: 1000,
            patience: 100,
            batch_size: 16,
            dropout: 0.25,
            lr: 1e-3,
            seed: 0,
            metric_segment_s: 1.0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, w) in [("strong", self.strong_weight), ("weak", self.weak_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return fail(format!("{name} weight must be a non-negative number, got {w}"));
            }
        }
        if self.strong_weight == 0.0 && self.weak_weight == 0.0 {
            return fail("strong and weak weights cannot both be zero".into());
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return fail(format!(
                "need 0 <= patience < max_epochs, got {} and {}",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.metric_segment_s > 0.0) {
            return fail("learning rate and segment length must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }
}

/// Early-stopping score, higher is better: `weak_f / 100 - strong_er`.
pub fn training_metric(weak_f: f64, strong_er: f64) -> f64 {
    weak_f / 100.0 - strong_er
}

/// Tracks the best score seen; only a strictly higher score counts as an
/// improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`; returns whether it is the new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if !(score > b) => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.best.is_some() && self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub strong_loss: f64,
    pub weak_loss: f64,
    pub total_loss: f64,
    pub weak: Prf,
    pub strong_er: Option<f64>,
    pub strong_f: Option<f64>,
    pub metric: f64,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<M> {
    /// Parameters from the epoch with the best validation metric.
    pub model: M,
    pub best_epoch: usize,
    pub history: Vec<EpochReport>,
}

fn batch_input(examples: &[&Example], classes: usize) -> Result<(Array, Array)> {
    let t = examples[0].features.frames();
    let f = examples[0].features.bands();
    let mut x = Vec::with_capacity(examples.len() * t * f);
    let mut y = vec![0.0; examples.len() * classes];
    for (i, e) in examples.iter().enumerate() {
        x.extend_from_slice(e.features.values());
        for &c in &e.weak {
            if c >= classes {
                return Err(Error::invalid(format!("`{}` has label {c} >= {classes}", e.name)));
            }
            y[i * classes + c] = 1.0;
        }
    }
    Ok((
        Array::from_vec(&[examples.len(), t, f], x)?,
        Array::from_vec(&[examples.len(), classes], y)?,
    ))
}

fn check_examples(model: &dyn SedModel, train: &[Example]) -> Result<()> {
    let first = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("no training clips".into()))?;
    let t = first.features.frames();
    for e in train {
        if e.features.frames() != t {
            return Err(Error::invalid(format!(
                "training clips must share a length: `{}` has {} frames, `{}` has {t}",
                e.name,
                e.features.frames(),
                first.name
            )));
        }
        if e.features.bands() != model.input_bands() {
            return Err(Error::shape(format!(
                "`{}` has {} bands, the model expects {}",
                e.name,
                e.features.bands(),
                model.input_bands()
            )));
        }
    }
    Ok(())
}

/// Trains `model` on weak labels only and keeps the parameters of the
/// epoch with the best validation metric. Strong annotations of the
/// training clips are never read.
pub fn fit<M: SedModel + Clone>(
    mut model: M,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
) -> Result<FitOutcome<M>> {
    cfg.validate()?;
    check_examples(&model, train)?;
    if validation.is_empty() {
        return Err(Error::EmptyDataset("no validation clips".into()));
    }
    let classes = model.num_classes();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut strong_sum, mut weak_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, weak_target) = batch_input(&batch, classes)?;
            let frames = x.shape()[1];
            let strong_target = replicate_weak_to_strong(&weak_target, frames)?;
            let pred = model.forward(&x, Mode::Train)?;
            let loss = combined_loss(
                &pred.strong,
                &strong_target,
                pred.weak.as_ref().map(|w| (w, &weak_target)),
                cfg.strong_weight,
                cfg.weak_weight,
            )?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b} (strong {}, weak {})",
                    loss.strong, loss.weak
                )));
            }
            model.backward(&loss.grad_strong, loss.grad_weak.as_ref())?;
            let mut params = model.params_mut();
            if let Some(p) = params.iter().position(|p| p.grad().iter().any(|g| !g.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter tensor {p} at epoch {epoch}, batch {b}"
                )));
            }
            adam.step(&mut params)?;
            let n = batch.len() as f64;
            strong_sum += loss.strong * n;
            weak_sum += loss.weak * n;
            total_sum += loss.total * n;
        }
        let n = train.len() as f64;
        let report = evaluate_split(&mut model, validation, cfg.metric_segment_s, cfg.threshold)?;
        let (strong_er, strong_f) = match report.strong {
            Some(s) => (Some(s.er), Some(s.f)),
            None => (None, None),
        };
        let metric = training_metric(report.weak.f, strong_er.unwrap_or(0.0));
        let best = stopper.update(epoch, metric);
        if best {
            best_model = model.clone();
        }
        let rep = EpochReport {
            epoch,
            strong_loss: strong_sum / n,
            weak_loss: weak_sum / n,
            total_loss: total_sum / n,
            weak: report.weak,
            strong_er,
            strong_f,
            metric,
            best,
        };
        info!(
            "epoch {epoch}: loss {:.4} (strong {:.4}, weak {:.4}) weak F {:.1} ER {} metric {:.3}{}",
            rep.total_loss,
            rep.strong_loss,
            rep.weak_loss,
            rep.weak.f,
            strong_er.map_or("n/a".into(), |e| format!("{e:.3}")),
            metric,
            if best { " *" } else { "" }
        );
        history.push(rep);
        if stopper.should_stop() {
            info!("no improvement for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    let (best_epoch, _) = stopper.best().expect("at least one epoch ran");
    Ok(FitOutcome {
        model: best_model,
        best_epoch,
        history,
    })
}

pub fn write_history_csv<W: Write>(mut out: W, history: &[EpochReport]) -> Result<()> {
    writeln!(
        out,
        "epoch,strong_loss,weak_loss,total_loss,weak_p,weak_r,weak_f,strong_er,strong_f,metric,best"
    )?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in history {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{},{},{:.6},{}",
            r.epoch,
            r.strong_loss,
            r.weak_loss,
            r.total_loss,
            r.weak.precision,
            r.weak.recall,
            r.weak.f,
            opt(r.strong_er),
            opt(r.strong_f),
            r.metric,
            u8::from(r.best)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;
    use crate::metrics::{Event, EventList};
    use crate::model::{ConvSpec, Crnn, ModelConfig};

    #[test]
    fn metric_values() {
        assert!((training_metric(43.3, 0.84) - -0.407).abs() < 1e-12);
        assert_eq!(training_metric(100.0, 0.0), 1.0);
        assert!((training_metric(0.0, 1.02) - -1.02).abs() < 1e-12);
    }

    #[test]
    fn stopping_rule_on_flat_scores() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (i, score) in [0.1, 0.1, 0.1, 0.1].into_iter().enumerate() {
            s.update(i + 1, score);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(s.best(), Some((1, 0.1)));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let both_zero = TrainConfig {
            strong_weight: 0.0,
            weak_weight: 0.0,
            ..TrainConfig::default()
        };
        assert!(both_zero.validate().is_err());
        let patient = TrainConfig {
            patience: 10,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        assert!(patient.validate().is_err());
    }

    fn toy_example(name: &str, class: usize) -> Example {
        // Band `class` is loud everywhere; the rest is quiet.
        let (t, f) = (6, 4);
        let values = (0..t * f)
            .map(|i| if i % f == class { 1.0 } else { -1.0 })
            .collect();
        Example {
            name: name.into(),
            features: FeatureMatrix::new(t, f, values, 0.5).unwrap(),
            weak: [class].into(),
            strong: Some(EventList::new(vec![Event::new(class, 0.0, 3.0).unwrap()], 2).unwrap()),
            duration_s: 3.0,
        }
    }

    fn toy_model(seed: u64) -> Crnn {
        Crnn::new(ModelConfig {
            num_classes: 2,
            input_bands: 4,
            conv: vec![ConvSpec { filters: 3, pool: 4 }],
            gru_units: 3,
            strong_dense: vec![2],
            weak_dense: vec![2],
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn single_clip_is_memorized() {
        let clip = toy_example("a", 1);
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 199,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let out = fit(toy_model(1), std::slice::from_ref(&clip), std::slice::from_ref(&clip), &cfg).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.total_loss).collect();
        assert!(losses.last().unwrap() < &(0.1 * losses[0]), "{losses:?}");
        let mut m = out.model;
        let (strong, _) = m.predict(&clip.features).unwrap();
        let weak = crate::train::weak_from_strong(&strong, 0.5).unwrap();
        assert_eq!(weak, clip.weak);
        // Best epoch never scores below any earlier epoch.
        let best = &out.history[out.best_epoch - 1];
        assert!(out.history[..out.best_epoch].iter().all(|r| r.metric <= best.metric));
    }

    #[test]
    fn fit_is_deterministic_and_logs_csv() {
        let train = vec![toy_example("a", 0), toy_example("b", 1), toy_example("c", 0)];
        let cfg = TrainConfig {
            max_epochs: 5,
            patience: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = fit(toy_model(2), &train, &train, &cfg).unwrap();
        let b = fit(toy_model(2), &train, &train, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        for r in &a.history {
            let combined = cfg.strong_weight * r.strong_loss + cfg.weak_weight * r.weak_loss;
            assert!((combined - r.total_loss).abs() < 1e-12);
        }
        let mut csv = Vec::new();
        write_history_csv(&mut csv, &a.history).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), a.history.len() + 1);
    }

    #[test]
    fn empty_and_mixed_length_sets_are_rejected() {
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 1,
            ..TrainConfig::default()
        };
        let v = vec![toy_example("a", 0)];
        assert!(matches!(fit(toy_model(0), &[], &v, &cfg), Err(Error::EmptyDataset(_))));
        let mut short = toy_example("b", 1);
        short.features = FeatureMatrix::new(3, 4, vec![0.0; 12], 0.5).unwrap();
        assert!(fit(toy_model(0), &[toy_example("a", 0), short], &v, &cfg).is_err());
    }
}
