//! Gradient-based learner over a zoo model and a prepared dataset.

use std::sync::Arc;

use plume_tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{pressure_loss, saturation_loss, sigmoid};
use super::{EpochStats, Learner, TrainConfig};
use crate::datagen::{sample_seed, DatasetBundle};
use crate::profiling::{denormalize_pressure, normalize_pressure, PreprocessingConfig, PressureNormalization, PRESSURE_SCALE};
use crate::zoo::Model;
use crate::{CoreError, Qoi, Result};

/// Network-ready arrays for one quantity of interest.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub qoi: Qoi,
    pub dims: [usize; 3],
    pub timesteps: usize,
    /// `[N, cells]` standardised log-permeability.
    pub inputs: Vec<f64>,
    /// `[N, T * cells]` in model space: normalised pressure or raw saturation.
    pub targets: Vec<f64>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub pressure: PressureNormalization,
}

impl PreparedData {
    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn per_sample(&self) -> usize {
        self.cells() * self.timesteps
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let p = self.per_sample();
        &self.targets[i * p..(i + 1) * p]
    }

    /// Maps a model-space value to physical units (bar or saturation fraction).
    pub fn to_physical(&self, v: f64) -> f64 {
        match self.qoi {
            Qoi::Pressure => denormalize_pressure(v, &self.pressure) / PRESSURE_SCALE,
            Qoi::Saturation => sigmoid(v),
        }
    }

    /// Physical truth for `indices`, concatenated.
    pub fn truth_physical(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.per_sample());
        for &i in indices {
            out.extend(self.target(i).iter().map(|&v| match self.qoi {
                Qoi::Pressure => denormalize_pressure(v, &self.pressure) / PRESSURE_SCALE,
                Qoi::Saturation => v,
            }));
        }
        out
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Vec<f64>) {
        let c = self.cells();
        let d = self.dims;
        let mut x = Vec::with_capacity(idx.len() * c);
        let mut y = Vec::with_capacity(idx.len() * self.per_sample());
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * c..(i + 1) * c]);
            y.extend_from_slice(self.target(i));
        }
        let x = Tensor::from_vec(&[idx.len(), 1, d[0], d[1], d[2]], x).expect("batch shape");
        (x, y)
    }
}

pub fn prepare_data(bundle: &DatasetBundle, qoi: Qoi, pre: &PreprocessingConfig) -> Result<PreparedData> {
    let m = &bundle.manifest;
    pre.pressure.validate()?;
    let inputs = bundle.inputs.iter().map(|&v| pre.inputs.apply(v as f64)).collect();
    let targets = match qoi {
        Qoi::Pressure => bundle
            .pressure
            .iter()
            .map(|&p| normalize_pressure(p as f64, &pre.pressure))
            .collect(),
        Qoi::Saturation => bundle.saturation.iter().map(|&s| s as f64).collect(),
    };
    Ok(PreparedData {
        qoi,
        dims: m.grid.dims(),
        timesteps: m.timesteps,
        inputs,
        targets,
        train: m.split.train.clone(),
        val: m.split.val.clone(),
        test: m.split.test.clone(),
        pressure: pre.pressure,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Pressure,
    Saturation { lambda_bce: f64, tau: f64 },
}

impl LossKind {
    pub fn eval(&self, out: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        match *self {
            LossKind::Pressure => pressure_loss(out, target),
            LossKind::Saturation { lambda_bce, tau } => saturation_loss(out, target, lambda_bce, tau),
        }
    }
}

/// Deliberate faults used to exercise the recovery paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnerFaults {
    /// Report a NaN training loss at this epoch.
    pub nan_loss_epoch: Option<u32>,
    /// Multiply every gradient by this factor before clipping.
    pub grad_scale: f64,
    /// Force the learning rate to zero.
    pub zero_lr: bool,
}

impl Default for LearnerFaults {
    fn default() -> Self {
        Self {
            nan_loss_epoch: None,
            grad_scale: 1.0,
            zero_lr: false,
        }
    }
}

/// Physical-unit predictions of `model` evaluated with `params`, concatenated
/// over `indices`.
pub fn predict_physical(model: &Model, params: &ParamStore, data: &PreparedData, indices: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len() * data.per_sample());
    for chunk in indices.chunks(4) {
        let (x, _) = data.batch(chunk);
        let vals = ModelLearner::forward_values(params, model, x);
        out.extend(vals.into_iter().map(|v| data.to_physical(v)));
    }
    out
}

pub struct ModelLearner {
    pub model: Model,
    opt: AdamW,
    data: Arc<PreparedData>,
    loss: LossKind,
    batch_size: usize,
    clip: f64,
    train_batches: Option<usize>,
    val_batches: Option<usize>,
    seed: u64,
    faults: LearnerFaults,
}

impl ModelLearner {
    pub fn new(model: Model, cfg: &TrainConfig, data: Arc<PreparedData>, faults: LearnerFaults) -> Result<Self> {
        cfg.validate()?;
        if model.spec.dims != data.dims || model.spec.timesteps != data.timesteps {
            return Err(CoreError::Shape {
                dim: "grid".into(),
                reason: format!(
                    "model built for {:?} x {} but data is {:?} x {}",
                    model.spec.dims, model.spec.timesteps, data.dims, data.timesteps
                ),
            });
        }
        let lr = if faults.zero_lr { 0.0 } else { cfg.optimizer.learning_rate };
        let opt = AdamW::new(AdamWConfig::new(lr, cfg.optimizer.weight_decay), &model.params);
        let loss = match data.qoi {
            Qoi::Pressure => LossKind::Pressure,
            Qoi::Saturation => LossKind::Saturation {
                lambda_bce: if model.spec.family.supports_aux_bce() { cfg.lambda_bce } else { 0.0 },
                tau: cfg.tau,
            },
        };
        Ok(Self {
            model,
            opt,
            data,
            loss,
            batch_size: cfg.batch_size,
            clip: cfg.grad_clip_norm,
            train_batches: cfg.train_batches,
            val_batches: cfg.val_batches,
            seed: cfg.seed,
            faults,
        })
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn set_faults(&mut self, faults: LearnerFaults) {
        self.faults = faults;
    }

    fn forward_values(params: &ParamStore, model: &Model, x: Tensor) -> Vec<f64> {
        let mut g = Graph::new(params);
        let xv = g.input(x);
        let y = model.forward(&mut g, xv);
        g.value(y).data().to_vec()
    }

    /// Physical-unit predictions for `indices` using `weights` (or the current ones).
    pub fn predict_physical(&self, indices: &[usize], weights: Option<&ParamStore>) -> Vec<f64> {
        predict_physical(&self.model, weights.unwrap_or(&self.model.params), &self.data, indices)
    }

    /// Mean loss over `indices` in batches, with the given weights.
    pub fn loss_on(&self, indices: &[usize], weights: Option<&ParamStore>, cap: Option<usize>) -> f64 {
        let params = weights.unwrap_or(&self.model.params);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in indices.chunks(self.batch_size).take(cap.unwrap_or(usize::MAX)) {
            let (x, y) = self.data.batch(chunk);
            let out = Self::forward_values(params, &self.model, x);
            match self.loss.eval(&out, &y) {
                Ok((v, _)) => total += v,
                Err(_) => return f64::NAN,
            }
            count += 1;
        }
        if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        }
    }
}

impl Learner for ModelLearner {
    fn train_epoch(&mut self, epoch: u32) -> EpochStats {
        let mut order = self.data.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut stats = EpochStats::default();
        let mut total = 0.0;
        let mut count = 0usize;
        let cap = self.train_batches.unwrap_or(usize::MAX);
        for chunk in order.chunks(self.batch_size).take(cap) {
            let (x, y) = self.data.batch(chunk);
            let mut grads = {
                let mut g = Graph::new(&self.model.params);
                let xv = g.input(x);
                let out = self.model.forward(&mut g, xv);
                let (mut v, grad) = match self.loss.eval(g.value(out).data(), &y) {
                    Ok(r) => r,
                    Err(_) => (f64::NAN, Vec::new()),
                };
                if self.faults.nan_loss_epoch == Some(epoch) {
                    v = f64::NAN;
                }
                if !v.is_finite() {
                    stats.train_loss = f64::NAN;
                    return stats;
                }
                total += v;
                count += 1;
                let shape = g.shape(out);
                let root = g.external_loss(out, v, Tensor::from_vec(&shape, grad).expect("grad shape"));
                g.backward(root).params
            };
            if self.faults.grad_scale != 1.0 {
                for t in &mut grads {
                    for v in t.data_mut() {
                        *v *= self.faults.grad_scale;
                    }
                }
            }
            let pre = clip_grad_norm(&mut grads, self.clip);
            let post = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            stats.grad_norms.push(pre);
            stats.post_clip_norms.push(post);
            if !pre.is_finite() {
                stats.train_loss = total / count as f64;
                return stats;
            }
            self.opt.step(&mut self.model.params, &grads);
        }
        stats.train_loss = if count == 0 { f64::NAN } else { total / count as f64 };
        stats
    }

    fn validate(&mut self, _epoch: u32) -> f64 {
        self.loss_on(&self.data.val, None, self.val_batches)
    }

    fn snapshot(&self) -> ParamStore {
        self.model.params.rounded_f32()
    }
}
