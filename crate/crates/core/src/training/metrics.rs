use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub rmse: f64,
    pub rel_l2: f64,
}

/// Pooled R² and RMSE over every element; relative L2 averaged per sample.
/// `pred` and `truth` hold `n_samples` equal-length samples back to back.
pub fn compute_metrics(pred: &[f64], truth: &[f64], n_samples: usize) -> Result<Metrics> {
    if pred.len() != truth.len() || truth.is_empty() || n_samples == 0 || truth.len() % n_samples != 0 {
        return Err(CoreError::Shape {
            dim: "elements".into(),
            reason: format!(
                "prediction {} vs truth {} elements over {n_samples} samples",
                pred.len(),
                truth.len()
            ),
        });
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        ss_res += (p - t) * (p - t);
        ss_tot += (t - mean) * (t - mean);
    }
    if ss_tot == 0.0 {
        return Err(CoreError::Numerical("R² undefined for constant truth".into()));
    }
    let per = truth.len() / n_samples;
    let mut rel = 0.0;
    for (ps, ts) in pred.chunks(per).zip(truth.chunks(per)) {
        let num: f64 = ps.iter().zip(ts).map(|(p, t)| (p - t) * (p - t)).sum::<f64>().sqrt();
        let den: f64 = ts.iter().map(|t| t * t).sum::<f64>().sqrt();
        rel += if den > 0.0 {
            num / den
        } else if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    Ok(Metrics {
        r2: 1.0 - ss_res / ss_tot,
        rmse: (ss_res / n).sqrt(),
        rel_l2: rel / n_samples as f64,
    })
}
