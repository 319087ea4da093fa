//! Full training: the epoch loop, early stopping, instability detection and
//! checkpoint bookkeeping.

mod learner;
mod loss;
mod metrics;

use plume_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::hpo::Assignment;

pub use learner::{predict_physical, prepare_data, LearnerFaults, LossKind, ModelLearner, PreparedData};
pub use loss::{early_stop_score, pressure_loss, saturation_loss, sigmoid};
pub use metrics::{compute_metrics, Metrics};

pub const IMPROVEMENT_EPS: f64 = 1e-6;
pub const EXPLOSION_NORM: f64 = 1e3;
pub const EXPLOSION_STEPS: usize = 3;
pub const VANISHING_NORM: f64 = 1e-10;
pub const DEFAULT_TAU: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub patience: u32,
    pub grad_clip_norm: f64,
    pub lambda_bce: f64,
    pub tau: f64,
    pub seed: u64,
    /// Caps on batches per epoch; `None` uses the whole split.
    pub train_batches: Option<usize>,
    pub val_batches: Option<usize>,
}

impl TrainConfig {
    /// Pipeline full-training defaults.
    pub fn pipeline(learning_rate: f64, weight_decay: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adamw,
                learning_rate,
                weight_decay,
            },
            batch_size,
            max_epochs: 30,
            patience: 15,
            grad_clip_norm: 1.0,
            lambda_bce: 0.0,
            tau: DEFAULT_TAU,
            seed,
            train_batches: None,
            val_batches: None,
        }
    }

    /// Fixed-hyperparameter reference protocol.
    pub fn baseline(seed: u64) -> Self {
        Self {
            max_epochs: 500,
            patience: 20,
            ..Self::pipeline(1e-4, 1e-5, 1, seed)
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::CoreError::Parameter(m.into()));
        if !(self.optimizer.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// JSON has no NaN or infinity; non-finite values are written as `null`.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    #[serde(with = "nullable")]
    pub train_loss: f64,
    #[serde(with = "nullable")]
    pub val_loss: f64,
    #[serde(with = "nullable")]
    pub score: f64,
    #[serde(with = "nullable")]
    pub grad_norm_max: f64,
    #[serde(with = "nullable")]
    pub grad_norm_min: f64,
    #[serde(with = "nullable")]
    pub post_clip_max: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Instability,
    Pruned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstabilityKind {
    NonFiniteLoss,
    NonFiniteGradient,
    GradientExplosion,
    VanishingGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityEvent {
    pub epoch: u32,
    pub kind: InstabilityKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub epoch: u32,
    pub score: f64,
    pub weights_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalCheckpoint {
    pub epoch: u32,
    pub weights_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub card: String,
    pub hp: Assignment,
    pub round: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStore {
    pub best: Option<BestCheckpoint>,
    pub final_: Option<FinalCheckpoint>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub stopped_reason: StopReason,
    pub checkpoints: CheckpointStore,
    pub instability: Vec<InstabilityEvent>,
    pub eval: Option<Metrics>,
}

impl TrainResult {
    pub fn last_epoch(&self) -> u32 {
        self.history.last().map_or(0, |r| r.epoch)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.checkpoints.best.as_ref().map(|b| b.score)
    }
}

/// A training run's result together with its in-memory weights, which the
/// caller persists.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: TrainResult,
    pub best_weights: Option<ParamStore>,
    pub final_weights: Option<ParamStore>,
}

/// What one epoch of optimisation reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    /// Gradient norm before clipping, per step.
    pub grad_norms: Vec<f64>,
    /// Gradient norm after clipping, per step.
    pub post_clip_norms: Vec<f64>,
}

/// Anything the epoch loop can drive.
pub trait Learner {
    fn train_epoch(&mut self, epoch: u32) -> EpochStats;
    fn validate(&mut self, epoch: u32) -> f64;
    /// Current weights rounded to single precision.
    fn snapshot(&self) -> ParamStore;
}

/// Patience-based stopper on the combined score. Pure in the history prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: u32,
    pub best: Option<(u32, f64)>,
    pub since_best: u32,
}

impl EarlyStopper {
    pub fn new(patience: u32) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records `score` at `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: u32, score: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some((_, b)) => score < b - IMPROVEMENT_EPS,
        };
        if improved {
            self.best = Some((epoch, score));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    /// Stop epoch obtained by replaying `scores` (1-indexed epochs).
    pub fn replay(patience: u32, scores: &[f64]) -> Option<u32> {
        let mut s = Self::new(patience);
        for (i, &v) in scores.iter().enumerate() {
            if s.observe(i as u32 + 1, v).1 {
                return Some(i as u32 + 1);
            }
        }
        None
    }
}

/// Loop settings separate from the optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopOptions {
    pub epochs: u32,
    pub patience: u32,
    pub provenance: Provenance,
}

fn run_epochs(
    learner: &mut dyn Learner,
    opts: &LoopOptions,
    mut history: Vec<EpochRecord>,
    mut stopper: EarlyStopper,
    mut best_weights: Option<ParamStore>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> bool,
) -> TrainOutcome {
    let start = history.last().map_or(0, |r| r.epoch);
    let mut instability = Vec::new();
    let mut stopped = StopReason::MaxEpochs;
    let mut streak = 0usize;
    for epoch in start + 1..=start + opts.epochs {
        let stats = learner.train_epoch(epoch);
        let mut events = Vec::new();
        if !stats.train_loss.is_finite() {
            events.push((InstabilityKind::NonFiniteLoss, format!("training loss {}", stats.train_loss)));
        }
        if stats.grad_norms.iter().any(|g| !g.is_finite()) {
            events.push((InstabilityKind::NonFiniteGradient, "non-finite gradient norm".to_string()));
        }
        for &g in &stats.grad_norms {
            if g > EXPLOSION_NORM {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak == EXPLOSION_STEPS {
                events.push((
                    InstabilityKind::GradientExplosion,
                    format!("gradient norm above {EXPLOSION_NORM:e} for {EXPLOSION_STEPS} consecutive steps"),
                ));
            }
        }
        if !stats.grad_norms.is_empty() && stats.grad_norms.iter().all(|&g| g < VANISHING_NORM) {
            events.push((
                InstabilityKind::VanishingGradient,
                format!("gradient norm below {VANISHING_NORM:e} for the whole epoch"),
            ));
        }
        let val = if events.is_empty() { learner.validate(epoch) } else { f64::NAN };
        if events.is_empty() && !val.is_finite() {
            events.push((InstabilityKind::NonFiniteLoss, format!("validation loss {val}")));
        }
        let score = early_stop_score(stats.train_loss, val).unwrap_or(f64::NAN);
        let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| {
            if v.iter().any(|x| x.is_nan()) {
                f64::NAN
            } else {
                v.iter().copied().fold(init, f)
            }
        };
        let rec = EpochRecord {
            epoch,
            train_loss: stats.train_loss,
            val_loss: val,
            score,
            grad_norm_max: fold(&stats.grad_norms, f64::max, 0.0),
            grad_norm_min: fold(&stats.grad_norms, f64::min, f64::INFINITY),
            post_clip_max: fold(&stats.post_clip_norms, f64::max, 0.0),
            steps: stats.grad_norms.len(),
        };
        history.push(rec.clone());
        if !events.is_empty() {
            instability.extend(events.into_iter().map(|(kind, detail)| InstabilityEvent { epoch, kind, detail }));
            stopped = StopReason::Instability;
            break;
        }
        let (improved, stop) = stopper.observe(epoch, score);
        if improved {
            best_weights = Some(learner.snapshot());
        }
        if on_epoch(&rec) {
            stopped = StopReason::Pruned;
            break;
        }
        if stop {
            stopped = StopReason::EarlyStop;
            break;
        }
    }
    let last = history.last().map_or(start, |r| r.epoch);
    let final_weights = (last > start).then(|| learner.snapshot());
    TrainOutcome {
        result: TrainResult {
            history,
            stopped_reason: stopped,
            checkpoints: CheckpointStore {
                best: stopper.best.map(|(epoch, score)| BestCheckpoint {
                    epoch,
                    score,
                    weights_ref: None,
                }),
                final_: Some(FinalCheckpoint {
                    epoch: last,
                    weights_ref: None,
                }),
                provenance: opts.provenance.clone(),
            },
            instability,
            eval: None,
        },
        best_weights,
        final_weights,
    }
}

/// Trains from epoch 1 for up to `opts.epochs` epochs. `on_epoch` returning
/// true stops the run as pruned.
pub fn train(learner: &mut dyn Learner, opts: &LoopOptions, on_epoch: &mut dyn FnMut(&EpochRecord) -> bool) -> TrainOutcome {
    run_epochs(learner, opts, Vec::new(), EarlyStopper::new(opts.patience), None, on_epoch)
}

/// Continues `prior` for `extra` more epochs from the learner's current
/// weights. The epoch counter and history carry over; patience restarts.
pub fn resume(learner: &mut dyn Learner, prior: TrainOutcome, extra: u32, patience: u32) -> TrainOutcome {
    let mut stopper = EarlyStopper::new(patience);
    stopper.best = prior
        .result
        .checkpoints
        .best
        .as_ref()
        .map(|b| (b.epoch, b.score));
    let opts = LoopOptions {
        epochs: extra,
        patience,
        provenance: prior.result.checkpoints.provenance.clone(),
    };
    let mut out = run_epochs(
        learner,
        &opts,
        prior.result.history,
        stopper,
        prior.best_weights,
        &mut |_| false,
    );
    if out.final_weights.is_none() {
        out.final_weights = prior.final_weights;
    }
    let mut instability = prior.result.instability;
    instability.append(&mut out.result.instability);
    out.result.instability = instability;
    out
}
