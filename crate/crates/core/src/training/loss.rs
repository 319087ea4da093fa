//! Training objectives. Each returns the scalar value and its gradient with
//! respect to the network output.

use crate::{CoreError, Result};

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::Shape {
            dim: "elements".into(),
            reason: format!("prediction has {} elements, target {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Mean squared error on normalised pressure.
pub fn pressure_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((value / n, grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) - x * y + ln(1 + exp(-|x|))`.
fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// `MSE(sigmoid(logits), S) + lambda * BCE(logits, 1[S > tau])`.
pub fn saturation_loss(logits: &[f64], target: &[f64], lambda_bce: f64, tau: f64) -> Result<(f64, Vec<f64>)> {
    same_len(logits, target)?;
    if let Some(bad) = target.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CoreError::Parameter(format!("saturation target {bad} outside [0, 1]")));
    }
    if !(lambda_bce >= 0.0) {
        return Err(CoreError::Parameter(format!("lambda_bce must be non-negative, got {lambda_bce}")));
    }
    let n = logits.len() as f64;
    let mut mse = 0.0;
    let mut bce = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&x, &s)| {
            let p = sigmoid(x);
            let y = if s > tau { 1.0 } else { 0.0 };
            let d = p - s;
            mse += d * d;
            let mut g = 2.0 * d * p * (1.0 - p);
            if lambda_bce > 0.0 {
                bce += bce_with_logits(x, y);
                g += lambda_bce * (p - y);
            }
            g / n
        })
        .collect();
    Ok((mse / n + lambda_bce * bce / n, grad))
}

/// Early-stopping score: the plain sum of training and validation loss.
pub fn early_stop_score(train_loss: f64, val_loss: f64) -> Result<f64> {
    if !train_loss.is_finite() || !val_loss.is_finite() {
        return Err(CoreError::Numerical(format!(
            "non-finite loss (train {train_loss}, val {val_loss})"
        )));
    }
    Ok(train_loss + val_loss)
}
