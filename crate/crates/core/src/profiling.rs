//! Structural validation, statistical profiling and preprocessing choices
//! made by the data-analysis stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetBundle, GridSpec, Manifest};
use crate::error::{CoreError, Result};
use crate::Qoi;

/// Threshold below which a saturation value counts as "near zero".
pub const NEAR_ZERO_TAU: f64 = 1e-4;
pub const PRESSURE_SCALE: f64 = 1e5;
pub const NORM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub fraction_near_zero: f64,
}

impl FieldStats {
    /// Population statistics; `fraction_near_zero` counts `|v| <= tau`.
    pub fn compute<I>(values: I, tau: f64) -> Option<Self>
    where
        I: Iterator<Item = f64> + Clone,
    {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut near = 0usize;
        for v in values.clone() {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
            if v.abs() <= tau {
                near += 1;
            }
        }
        if n == 0 {
            return None;
        }
        let mean = (sum / n as f64).clamp(min, max);
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Some(Self {
            min,
            max,
            mean,
            std: var.sqrt(),
            fraction_near_zero: near as f64 / n as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataProfile {
    pub n_samples: usize,
    pub grid: GridSpec,
    pub timesteps: usize,
    pub split_sizes: SplitSizes,
    /// Which split the statistics were computed over.
    pub stats_split: String,
    /// Physical units: Pa for pressure, fraction for saturation.
    pub qoi_stats: BTreeMap<Qoi, FieldStats>,
    pub input_stats: Option<FieldStats>,
}

impl DataProfile {
    pub fn sparsity(&self, qoi: Qoi) -> Option<f64> {
        self.qoi_stats.get(&qoi).map(|s| s.fraction_near_zero)
    }

    /// One-paragraph rendering used in prompts and the audit trail.
    pub fn describe(&self) -> String {
        let g = &self.grid;
        let mut s = format!(
            "{} samples, spatial grid {}x{}x{}, {} timesteps, splits {}/{}/{}.",
            self.n_samples,
            g.nx,
            g.ny,
            g.nz,
            self.timesteps,
            self.split_sizes.train,
            self.split_sizes.val,
            self.split_sizes.test
        );
        if let Some(p) = self.qoi_stats.get(&Qoi::Pressure) {
            s.push_str(&format!(
                " Pressure range [{:.2}, {:.2}] bar, mean {:.2} bar, std {:.2} bar.",
                p.min / PRESSURE_SCALE,
                p.max / PRESSURE_SCALE,
                p.mean / PRESSURE_SCALE,
                p.std / PRESSURE_SCALE
            ));
        }
        if let Some(sat) = self.qoi_stats.get(&Qoi::Saturation) {
            s.push_str(&format!(
                " Saturation range [{:.3}, {:.3}], mean {:.4}, {:.1}% of voxels near zero.",
                sat.min,
                sat.max,
                sat.mean,
                100.0 * sat.fraction_near_zero
            ));
        }
        s
    }
}

fn split_sizes(m: &Manifest) -> SplitSizes {
    SplitSizes {
        train: m.split.train.len(),
        val: m.split.val.len(),
        test: m.split.test.len(),
    }
}

/// Shape-level profile from a manifest alone, without reading arrays.
pub fn profile_structure(manifest: &Manifest) -> Result<DataProfile> {
    let sizes = split_sizes(manifest);
    if sizes.train + sizes.val + sizes.test != manifest.n_samples {
        return Err(CoreError::Structure {
            array: "split".into(),
            reason: format!(
                "split sizes sum to {}, manifest has {} samples",
                sizes.train + sizes.val + sizes.test,
                manifest.n_samples
            ),
        });
    }
    let dims = manifest.grid.dims();
    let want_in = vec![manifest.n_samples, 1, dims[0], dims[1], dims[2]];
    let want_out = vec![manifest.n_samples, manifest.timesteps, dims[0], dims[1], dims[2]];
    for (name, want) in [("inputs", &want_in), ("pressure", &want_out), ("saturation", &want_out)] {
        match manifest.arrays.get(name) {
            None => {
                return Err(CoreError::Structure {
                    array: name.into(),
                    reason: "missing from manifest".into(),
                })
            }
            Some(info) if &info.shape != want => {
                return Err(CoreError::Structure {
                    array: name.into(),
                    reason: format!("shape {:?}, expected {:?}", info.shape, want),
                })
            }
            _ => {}
        }
    }
    Ok(DataProfile {
        n_samples: manifest.n_samples,
        grid: manifest.grid,
        timesteps: manifest.timesteps,
        split_sizes: sizes,
        stats_split: "train".into(),
        qoi_stats: BTreeMap::new(),
        input_stats: None,
    })
}

/// Full profile; statistics use only the training split.
pub fn profile_dataset(bundle: &DatasetBundle) -> Result<DataProfile> {
    bundle.validate()?;
    let mut profile = profile_structure(&bundle.manifest)?;
    let train = &bundle.manifest.split.train;
    let inputs = train
        .iter()
        .flat_map(|&i| bundle.input_sample(i).iter().map(|&v| v as f64));
    profile.input_stats = FieldStats::compute(inputs, NEAR_ZERO_TAU);
    for qoi in Qoi::ALL {
        let values = train
            .iter()
            .flat_map(move |&i| bundle.target_sample(qoi, i).iter().map(|&v| v as f64));
        if let Some(s) = FieldStats::compute(values, NEAR_ZERO_TAU) {
            profile.qoi_stats.insert(qoi, s);
        }
    }
    Ok(profile)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureNormalization {
    pub scale_divisor: f64,
    pub mu_p: f64,
    pub sigma_p: f64,
    pub epsilon: f64,
}

impl PressureNormalization {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_divisor > 0.0 && self.sigma_p >= 0.0 && self.epsilon > 0.0) {
            return Err(CoreError::Parameter(format!("invalid pressure normalization {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaturationTransform {
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationPreprocessing {
    pub transform: SaturationTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingConfig {
    pub pressure: PressureNormalization,
    pub saturation: SaturationPreprocessing,
    pub inputs: InputStandardization,
}

/// Z-scoring of the log-permeability input with training-split statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStandardization {
    pub mean: f64,
    pub std: f64,
}

impl InputStandardization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / (self.std + NORM_EPSILON)
    }
}

/// Pressure is divided by `1e5` (to bar) then z-scored with training-split
/// statistics; saturation keeps its native range.
pub fn configure_preprocessing(profile: &DataProfile) -> Result<PreprocessingConfig> {
    let p = profile.qoi_stats.get(&Qoi::Pressure).ok_or_else(|| {
        CoreError::Parameter("profile has no pressure statistics".into())
    })?;
    Ok(PreprocessingConfig {
        pressure: PressureNormalization {
            scale_divisor: PRESSURE_SCALE,
            mu_p: p.mean / PRESSURE_SCALE,
            sigma_p: p.std / PRESSURE_SCALE,
            epsilon: NORM_EPSILON,
        },
        saturation: SaturationPreprocessing {
            transform: SaturationTransform::Identity,
        },
        inputs: profile
            .input_stats
            .map(|s| InputStandardization { mean: s.mean, std: s.std })
            .unwrap_or(InputStandardization { mean: 0.0, std: 1.0 }),
    })
}

/// `(P / scale - mu) / (sigma + eps)`.
pub fn normalize_pressure(p: f64, cfg: &PressureNormalization) -> f64 {
    (p / cfg.scale_divisor - cfg.mu_p) / (cfg.sigma_p + cfg.epsilon)
}

pub fn denormalize_pressure(z: f64, cfg: &PressureNormalization) -> f64 {
    (z * (cfg.sigma_p + cfg.epsilon) + cfg.mu_p) * cfg.scale_divisor
}
