use super::LabelSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeakCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl WeakCounts {
    pub fn add_clip(&mut self, predicted: &LabelSet, reference: &LabelSet) {
        self.tp += predicted.intersection(reference).count();
        self.fp += predicted.difference(reference).count();
        self.fn_ += reference.difference(predicted).count();
    }

    pub fn prf(&self) -> Prf {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f: harmonic_f(precision, recall),
        }
    }
}

/// Precision, recall and F-score, all in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn harmonic_f(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-averaged P/R/F over all (clip, class) pairs.
pub fn weak_prf(predicted: &[LabelSet], reference: &[LabelSet]) -> Result<Prf> {
    if predicted.len() != reference.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} references",
            predicted.len(),
            reference.len()
        )));
    }
    let mut counts = WeakCounts::default();
    for (p, r) in predicted.iter().zip(reference) {
        counts.add_clip(p, r);
    }
    Ok(counts.prf())
}
