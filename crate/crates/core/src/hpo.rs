//! Search spaces, TPE and random samplers, the median pruner, and the trial loop.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const LR: &str = "lr";
pub const WEIGHT_DECAY: &str = "weight_decay";
pub const BATCH_SIZE: &str = "batch_size";
pub const BASE_CHANNELS: &str = "base_channels";
pub const NORM: &str = "norm";
pub const LAMBDA_BCE: &str = "lambda_bce";
pub const LAYERS: &str = "layers";
pub const HEADS: &str = "heads";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Text(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Real(r) if r.fract() == 0.0 => Some(*r as i64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:.3e}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

pub type Assignment = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
    Categorical { values: Vec<Value> },
}

impl Domain {
    pub fn contains(&self, v: &Value) -> bool {
        match self {
            Domain::LogUniform { lo, hi } | Domain::Uniform { lo, hi } => {
                v.as_f64().is_some_and(|x| x >= *lo && x <= *hi)
            }
            Domain::IntUniform { lo, hi } => matches!(v, Value::Int(i) if i >= lo && i <= hi),
            Domain::Categorical { values } => values.contains(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDef {
    pub name: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceConstraints {
    pub lr_upper_bound: Option<f64>,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamDef>,
    pub constraints: SpaceConstraints,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamDef>) -> Self {
        Self {
            params,
            constraints: SpaceConstraints {
                lr_upper_bound: None,
                grad_clip: 1.0,
            },
        }
    }

    pub fn get(&self, name: &str) -> Option<&Domain> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.domain)
    }

    pub fn remove(&mut self, name: &str) {
        self.params.retain(|p| p.name != name);
    }

    pub fn set(&mut self, name: &str, domain: Domain) {
        match self.params.iter_mut().find(|p| p.name == name) {
            Some(p) => p.domain = domain,
            None => self.params.push(ParamDef {
                name: name.into(),
                domain,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            let ok = match &p.domain {
                Domain::LogUniform { lo, hi } => *lo > 0.0 && lo < hi,
                Domain::Uniform { lo, hi } => lo < hi,
                Domain::IntUniform { lo, hi } => lo <= hi,
                Domain::Categorical { values } => !values.is_empty(),
            };
            if !ok {
                return Err(CoreError::Parameter(format!("invalid domain for {}", p.name)));
            }
        }
        if let (Some(b), Some(Domain::LogUniform { hi, .. } | Domain::Uniform { hi, .. })) =
            (self.constraints.lr_upper_bound, self.get(LR))
        {
            if b > *hi {
                return Err(CoreError::Parameter(format!(
                    "lr_upper_bound {b} exceeds lr domain hi {hi}"
                )));
            }
        }
        if !(self.constraints.grad_clip > 0.0) {
            return Err(CoreError::Parameter("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Domain of `p` after applying the lr bound.
    fn effective(&self, p: &ParamDef) -> Domain {
        match (&p.domain, self.constraints.lr_upper_bound) {
            (Domain::LogUniform { lo, hi }, Some(b)) if p.name == LR => Domain::LogUniform {
                lo: *lo,
                hi: hi.min(b).max(*lo),
            },
            (Domain::Uniform { lo, hi }, Some(b)) if p.name == LR => Domain::Uniform {
                lo: *lo,
                hi: hi.min(b).max(*lo),
            },
            (d, _) => d.clone(),
        }
    }

    pub fn contains(&self, a: &Assignment) -> bool {
        self.params.iter().all(|p| {
            a.get(&p.name)
                .is_some_and(|v| self.effective(p).contains(v))
        })
    }
}

/// Returns the space with the lr ceiling lowered to `lr_cap` and the clip set.
pub fn tighten_space(space: &SearchSpace, lr_cap: f64, grad_clip: f64) -> Result<SearchSpace> {
    if !(lr_cap > 0.0) || !(grad_clip > 0.0) {
        return Err(CoreError::Parameter("tightening values must be positive".into()));
    }
    let mut out = space.clone();
    for p in &mut out.params {
        if p.name != LR {
            continue;
        }
        match &mut p.domain {
            Domain::LogUniform { lo, hi } | Domain::Uniform { lo, hi } => {
                if lr_cap < *lo {
                    return Err(CoreError::Parameter(format!(
                        "lr cap {lr_cap} below lr domain lo {lo}"
                    )));
                }
                *hi = hi.min(lr_cap);
            }
            _ => return Err(CoreError::Parameter("lr must be continuous".into())),
        }
    }
    let hi = match out.get(LR) {
        Some(Domain::LogUniform { hi, .. } | Domain::Uniform { hi, .. }) => *hi,
        _ => lr_cap,
    };
    out.constraints.lr_upper_bound = Some(hi);
    out.constraints.grad_clip = grad_clip;
    Ok(out)
}

fn sample_domain<R: Rng + ?Sized>(d: &Domain, rng: &mut R) -> Value {
    match d {
        Domain::LogUniform { lo, hi } => {
            if lo >= hi {
                return Value::Real(*lo);
            }
            let e = rng.random_range(lo.ln()..hi.ln());
            Value::Real(e.exp().clamp(*lo, *hi))
        }
        Domain::Uniform { lo, hi } => {
            if lo >= hi {
                return Value::Real(*lo);
            }
            Value::Real(rng.random_range(*lo..*hi))
        }
        Domain::IntUniform { lo, hi } => Value::Int(rng.random_range(*lo..=*hi)),
        Domain::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
    }
}

/// Independent draw of each parameter from its domain.
pub fn random_suggest<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Assignment {
    space
        .params
        .iter()
        .map(|p| (p.name.clone(), sample_domain(&space.effective(p), rng)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub n_candidates: usize,
    pub gamma: f64,
    pub max_good: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 5,
            n_candidates: 24,
            gamma: 0.25,
            max_good: 25,
        }
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// One-dimensional truncated-Gaussian Parzen mixture on `[lo, hi]`.
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Parzen {
    fn fit(obs: &[f64], lo: f64, hi: f64) -> Self {
        let width = (hi - lo).max(1e-12);
        let prior_mu = 0.5 * (lo + hi);
        let mut mus: Vec<f64> = obs.to_vec();
        mus.push(prior_mu);
        let mut order: Vec<usize> = (0..mus.len()).collect();
        order.sort_by(|&a, &b| mus[a].total_cmp(&mus[b]));
        let n = mus.len();
        let floor = width / (100f64).min(1.0 + n as f64);
        let mut sigmas = vec![width; n];
        for (r, &i) in order.iter().enumerate() {
            if i == n - 1 {
                continue; // prior keeps the full width
            }
            let left = if r > 0 { mus[i] - mus[order[r - 1]] } else { mus[i] - lo };
            let right = if r + 1 < n { mus[order[r + 1]] - mus[i] } else { hi - mus[i] };
            sigmas[i] = left.max(right).clamp(floor, width);
        }
        let weights = vec![1.0 / n as f64; n];
        Self {
            mus,
            sigmas,
            weights,
            lo,
            hi,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.mus.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let (mu, s) = (self.mus[k], self.sigmas[k]);
        for _ in 0..100 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let x = mu + s * z;
            if x >= self.lo && x <= self.hi {
                return x;
            }
        }
        mu.clamp(self.lo, self.hi)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let mut p = 0.0;
        for ((&mu, &s), &w) in self.mus.iter().zip(&self.sigmas).zip(&self.weights) {
            let mass = (norm_cdf((self.hi - mu) / s) - norm_cdf((self.lo - mu) / s)).max(1e-300);
            let z = (x - mu) / s;
            p += w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * mass);
        }
        p.max(1e-300).ln()
    }
}

/// Maps a numeric domain to the space the Parzen windows live in.
fn to_internal(d: &Domain, v: &Value) -> Option<f64> {
    let x = v.as_f64()?;
    match d {
        Domain::LogUniform { .. } => Some(x.ln()),
        _ => Some(x),
    }
}

fn internal_bounds(d: &Domain) -> (f64, f64) {
    match d {
        Domain::LogUniform { lo, hi } => (lo.ln(), hi.ln()),
        Domain::Uniform { lo, hi } => (*lo, *hi),
        Domain::IntUniform { lo, hi } => (*lo as f64 - 0.5, *hi as f64 + 0.5),
        Domain::Categorical { .. } => (0.0, 0.0),
    }
}

fn from_internal(d: &Domain, x: f64) -> Value {
    match d {
        Domain::LogUniform { lo, hi } => Value::Real(x.exp().clamp(*lo, *hi)),
        Domain::Uniform { lo, hi } => Value::Real(x.clamp(*lo, *hi)),
        Domain::IntUniform { lo, hi } => Value::Int((x.round() as i64).clamp(*lo, *hi)),
        Domain::Categorical { .. } => unreachable!("categorical handled separately"),
    }
}

/// Observations usable by the sampler: completed trials by final value and
/// pruned trials by their last intermediate.
pub fn observations(study: &StudyRecord) -> Vec<(&Assignment, f64)> {
    study
        .trials
        .iter()
        .filter_map(|t| {
            let v = match t.state {
                TrialState::Completed => t.final_value,
                TrialState::Pruned => t.intermediate.last().map(|s| s.1),
                _ => None,
            }?;
            v.is_finite().then_some((&t.params, v))
        })
        .collect()
}

/// Tree-structured Parzen estimator suggestion.
pub fn tpe_suggest<R: Rng + ?Sized>(
    study: &StudyRecord,
    space: &SearchSpace,
    cfg: &TpeConfig,
    rng: &mut R,
) -> Assignment {
    let mut obs = observations(study);
    if obs.len() < cfg.n_startup {
        return random_suggest(space, rng);
    }
    obs.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n = obs.len();
    let n_good = ((cfg.gamma * n as f64).ceil() as usize).clamp(1, cfg.max_good).min(n);
    let (good, bad) = obs.split_at(n_good);
    let mut out = Assignment::new();
    for p in &space.params {
        let d = space.effective(p);
        let value = match &d {
            Domain::Categorical { values } => {
                let counts = |set: &[(&Assignment, f64)]| {
                    let mut c = vec![1.0; values.len()];
                    for (a, _) in set {
                        if let Some(i) = a.get(&p.name).and_then(|v| values.iter().position(|x| x == v)) {
                            c[i] += 1.0;
                        }
                    }
                    let s: f64 = c.iter().sum();
                    c.into_iter().map(|x| x / s).collect::<Vec<f64>>()
                };
                let l = counts(good);
                let g = counts(bad);
                let mut best = (f64::NEG_INFINITY, 0);
                for _ in 0..cfg.n_candidates {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = values.len() - 1;
                    for (i, w) in l.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    let score = l[k].ln() - g[k].ln();
                    if score > best.0 {
                        best = (score, k);
                    }
                }
                values[best.1].clone()
            }
            _ => {
                let (lo, hi) = internal_bounds(&d);
                if lo >= hi {
                    from_internal(&d, lo)
                } else {
                    let pts = |set: &[(&Assignment, f64)]| {
                        set.iter()
                            .filter_map(|(a, _)| a.get(&p.name).and_then(|v| to_internal(&d, v)))
                            .map(|x| x.clamp(lo, hi))
                            .collect::<Vec<f64>>()
                    };
                    let l = Parzen::fit(&pts(good), lo, hi);
                    let g = Parzen::fit(&pts(bad), lo, hi);
                    let mut best = (f64::NEG_INFINITY, 0.5 * (lo + hi));
                    for _ in 0..cfg.n_candidates {
                        let x = l.sample(rng);
                        let score = l.log_pdf(x) - g.log_pdf(x);
                        if score > best.0 {
                            best = (score, x);
                        }
                    }
                    from_internal(&d, best.1)
                }
            }
        };
        out.insert(p.name.clone(), value);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialState {
    Running,
    Completed,
    Pruned,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u32,
    pub params: Assignment,
    /// `(epoch, validation loss)` with 1-indexed epochs.
    pub intermediate: Vec<(u32, f64)>,
    pub state: TrialState,
    pub final_value: Option<f64>,
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn value_at(&self, step: u32) -> Option<f64> {
        self.intermediate.iter().find(|s| s.0 == step).map(|s| s.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpoBudget {
    pub n_trials: u32,
    pub epochs_per_trial: u32,
    pub train_batches: usize,
    pub val_batches: usize,
}

impl Default for HpoBudget {
    fn default() -> Self {
        Self {
            n_trials: 15,
            epochs_per_trial: 5,
            train_batches: 50,
            val_batches: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    pub n_warmup: u32,
    pub n_min_trials: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        Self {
            n_warmup: 1,
            n_min_trials: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Tpe,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub card: String,
    /// Pipeline round this study belongs to; 0 outside the pipeline.
    #[serde(default)]
    pub round: u32,
    pub space: SearchSpace,
    pub trials: Vec<TrialRecord>,
    pub best_trial: Option<u32>,
    pub budget: HpoBudget,
    pub seed: u64,
    pub sampler: SamplerKind,
}

impl StudyRecord {
    pub fn new(card: &str, space: SearchSpace, budget: HpoBudget, seed: u64, sampler: SamplerKind) -> Self {
        Self {
            card: card.into(),
            round: 0,
            space,
            trials: Vec::new(),
            best_trial: None,
            budget,
            seed,
            sampler,
        }
    }

    pub fn count(&self, state: TrialState) -> usize {
        self.trials.iter().filter(|t| t.state == state).count()
    }

    pub fn best(&self) -> Option<&TrialRecord> {
        self.best_trial
            .and_then(|id| self.trials.iter().find(|t| t.trial_id == id))
    }

    fn refresh_best(&mut self) {
        self.best_trial = self
            .trials
            .iter()
            .filter(|t| t.state == TrialState::Completed)
            .filter_map(|t| t.final_value.map(|v| (t.trial_id, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(id, _)| id);
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Whether `current` should stop at `step`, judged against the other trials
/// of `history` that reported a finite value at the same step.
pub fn median_prune_decision(
    current: &TrialRecord,
    history: &StudyRecord,
    step: u32,
    cfg: &PrunerConfig,
) -> bool {
    if step < cfg.n_warmup {
        return false;
    }
    let Some(v) = current.value_at(step) else {
        return false;
    };
    let mut prior: Vec<f64> = history
        .trials
        .iter()
        .filter(|t| t.trial_id != current.trial_id)
        .filter_map(|t| t.value_at(step))
        .filter(|x| x.is_finite())
        .collect();
    if prior.len() < cfg.n_min_trials.max(1) {
        return false;
    }
    !v.is_finite() || v > median(&mut prior)
}

/// What a trial reports back to the study loop.
#[derive(Clone, Debug, PartialEq)]
pub enum TrialOutcome {
    Completed(f64),
    Pruned,
    Failed(String),
}

/// Per-epoch hook handed to a trial: records the value and answers whether
/// the trial should be pruned.
pub struct Reporter<'a> {
    study: &'a StudyRecord,
    trial: TrialRecord,
    cfg: PrunerConfig,
}

impl Reporter<'_> {
    pub fn report(&mut self, step: u32, value: f64) -> bool {
        self.trial.intermediate.push((step, value));
        median_prune_decision(&self.trial, self.study, step, &self.cfg)
    }

    pub fn trial_id(&self) -> u32 {
        self.trial.trial_id
    }
}

/// Runs `budget.n_trials` trials serially, sampling with `sampler` and
/// pruning with the median rule.
pub fn run_study<F>(
    card: &str,
    space: &SearchSpace,
    budget: HpoBudget,
    pruner: PrunerConfig,
    sampler: SamplerKind,
    seed: u64,
    mut objective: F,
) -> Result<StudyRecord>
where
    F: FnMut(&Assignment, &mut Reporter) -> TrialOutcome,
{
    space.validate()?;
    if budget.n_trials == 0 || budget.epochs_per_trial == 0 {
        return Err(CoreError::Parameter("HPO budget must be positive".into()));
    }
    let mut study = StudyRecord::new(card, space.clone(), budget, seed, sampler);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tpe = TpeConfig::default();
    for id in 0..budget.n_trials {
        let params = match sampler {
            SamplerKind::Tpe => tpe_suggest(&study, space, &tpe, &mut rng),
            SamplerKind::Random => random_suggest(space, &mut rng),
        };
        let trial = TrialRecord {
            trial_id: id,
            params: params.clone(),
            intermediate: Vec::new(),
            state: TrialState::Running,
            final_value: None,
            failure: None,
        };
        let mut reporter = Reporter {
            study: &study,
            trial,
            cfg: pruner,
        };
        let outcome = objective(&params, &mut reporter);
        let mut trial = reporter.trial;
        match outcome {
            TrialOutcome::Completed(v) if v.is_finite() => {
                trial.state = TrialState::Completed;
                trial.final_value = Some(v);
            }
            TrialOutcome::Completed(v) => {
                trial.state = TrialState::Failed;
                trial.failure = Some(format!("non-finite objective {v}"));
            }
            TrialOutcome::Pruned if !trial.intermediate.is_empty() => trial.state = TrialState::Pruned,
            TrialOutcome::Pruned => {
                trial.state = TrialState::Failed;
                trial.failure = Some("pruned before reporting".into());
            }
            TrialOutcome::Failed(reason) => {
                trial.state = TrialState::Failed;
                trial.failure = Some(reason);
            }
        }
        study.trials.push(trial);
        study.refresh_best();
    }
    Ok(study)
}
