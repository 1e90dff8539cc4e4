use std::io::Write;

use log::info;

use super::{fit, TrainConfig};
use crate::dataset::Example;
use crate::metrics::{evaluate_split, SplitReport};
use crate::model::SedModel;
use crate::{Error, Result};

/// Outcome of training with one pair of head weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strong_weight: f64,
    pub weak_weight: f64,
    pub best_epoch: usize,
    pub report: SplitReport,
}

/// Pairs `(w, 1)` for each value, then `(1, w)` in reverse order, with
/// duplicates dropped. `[0.002, 0.02, 0.2, 1]` gives seven pairs from
/// `(0.002, 1)` to `(1, 0.002)`.
pub fn default_weight_pairs(values: &[f64]) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = values.iter().map(|&w| (w, 1.0)).collect();
    pairs.extend(values.iter().rev().map(|&w| (1.0, w)));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Trains a fresh model from `build` for every weight pair and scores the
/// best checkpoint on `validation`.
pub fn weight_sweep<M, B>(
    build: B,
    train: &[Example],
    validation: &[Example],
    pairs: &[(f64, f64)],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>>
where
    M: SedModel + Clone,
    B: Fn() -> Result<M>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("no weight pairs to sweep"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for &(strong_weight, weak_weight) in pairs {
        info!("sweep: strong weight {strong_weight}, weak weight {weak_weight}");
        let run_cfg = TrainConfig {
            strong_weight,
            weak_weight,
            ..cfg.clone()
        };
        let out = fit(build()?, train, validation, &run_cfg)?;
        let mut model = out.model;
        let report = evaluate_split(&mut model, validation, cfg.metric_segment_s, cfg.threshold)?;
        rows.push(SweepRow {
            strong_weight,
            weak_weight,
            best_epoch: out.best_epoch,
            report,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "strong_weight,weak_weight,weak_p,weak_r,weak_f,strong_er,strong_f")?;
    for r in rows {
        let (er, f) = match &r.report.strong {
            Some(s) => (format!("{:.6}", s.er), format!("{:.6}", s.f)),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{er},{f}",
            r.strong_weight,
            r.weak_weight,
            r.report.weak.precision,
            r.report.weak.recall,
            r.report.weak.f
        )?;
    }
    Ok(())
}
