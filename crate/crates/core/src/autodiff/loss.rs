use super::Array;
use crate::Result;

/// Predictions are clipped into `[BCE_CLIP, 1 - BCE_CLIP]` before the log.
pub const BCE_CLIP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to `pred`.
///
/// The gradient is `(p - y) / (p (1 - p)) / N`, evaluated at the clipped
/// prediction.
pub fn bce_loss(pred: &Array, target: &Array) -> Result<(f64, Array)> {
    target.expect_shape(pred.shape(), "bce target")?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array::zeros(pred.shape());
    for ((&p, &y), g) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        *g = (p - y) / (p * (1.0 - p)) / n;
    }
    Ok((loss / n, grad))
}
