use std::collections::BTreeSet;

use crate::autodiff::{bce_loss, Array};
use crate::{Error, Result};

/// Copies a weak label vector onto every one of `frames` time steps.
///
/// `weak` is `[C]` or `[B, C]`; the result is `[frames, C]` or
/// `[B, frames, C]`.
pub fn replicate_weak_to_strong(weak: &Array, frames: usize) -> Result<Array> {
    if frames == 0 {
        return Err(Error::invalid("cannot replicate onto zero frames"));
    }
    let classes = weak.last_dim();
    let lead = &weak.shape()[..weak.rank().saturating_sub(1)];
    let mut shape = lead.to_vec();
    shape.extend([frames, classes]);
    let mut data = Vec::with_capacity(weak.len() * frames);
    for row in weak.data().chunks_exact(classes.max(1)) {
        for _ in 0..frames {
            data.extend_from_slice(row);
        }
    }
    Array::from_vec(&shape, data)
}

/// Weak labels recovered from a `[T, C]` strong grid: class `c` is
/// predicted when its maximum over time reaches `threshold`.
pub fn weak_from_strong(strong: &Array, threshold: f64) -> Result<BTreeSet<usize>> {
    if strong.rank() != 2 {
        return Err(Error::shape(format!(
            "weak_from_strong expects [T, C], got {:?}",
            strong.shape()
        )));
    }
    let classes = strong.shape()[1];
    let mut max = vec![f64::NEG_INFINITY; classes];
    for row in strong.data().chunks_exact(classes.max(1)) {
        for (m, &v) in max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    Ok(max
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= threshold)
        .map(|(c, _)| c)
        .collect())
}

/// Loss values and the gradients to feed back into the two output heads.
#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub total: f64,
    pub strong: f64,
    pub weak: f64,
    pub grad_strong: Array,
    pub grad_weak: Option<Array>,
}

/// `strong_weight · BCE(strong) + weak_weight · BCE(weak)` over
/// mean-reduced binary cross-entropies. Models without a weak head pass
/// `weak = None`, which contributes nothing.
pub fn combined_loss(
    strong_pred: &Array,
    strong_target: &Array,
    weak: Option<(&Array, &Array)>,
    strong_weight: f64,
    weak_weight: f64,
) -> Result<CombinedLoss> {
    let (strong, mut grad_strong) = bce_loss(strong_pred, strong_target)?;
    grad_strong.data_mut().iter_mut().for_each(|g| *g *= strong_weight);
    let (weak_loss, grad_weak) = match weak {
        Some((pred, target)) => {
            let (l, mut g) = bce_loss(pred, target)?;
            g.data_mut().iter_mut().for_each(|v| *v *= weak_weight);
            (l, Some(g))
        }
        None => (0.0, None),
    };
    Ok(CombinedLoss {
        total: strong_weight * strong + weak_weight * weak_loss,
        strong,
        weak: weak_loss,
        grad_strong,
        grad_weak,
    })
}
