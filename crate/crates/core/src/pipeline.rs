//! End-to-end orchestration: profiling, preprocessing, model selection, then
//! per quantity of interest the HPO / training / self-correction loop, and
//! finally consolidation into the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use plume_tensor::ParamStore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::agents::{
    agent_loop, model_selection_policy, parse_instruction, ranking_of, Backend, Decision, DecisionRequest, LlmReasoner,
    Observation, ReasonStage, Reasoner, ReasonerConfig, ScriptedReasoner,
};
use crate::context::{AuditEntry, ErrorTrace, SharedContext, Stage, TargetMode, TargetSpec};
use crate::control::{
    diagnose, meets_quality, select_architecture, self_correct, update_global_best, ArchitectureSelection, ControlBudgets,
    CorrectionState, DiagnoseInput, Diagnosis, DiagnosisState, Deployment, GlobalBestEntry, RecoveryAction, RowKind,
    TimelineRow, PLATEAU_TOL,
};
use crate::datagen::{read_dataset, sample_seed, DatasetBundle};
use crate::error::write_file;
use crate::hpo::{self, Assignment, Domain, HpoBudget, PrunerConfig, SamplerKind, SearchSpace, TrialOutcome, Value};
use crate::profiling::{configure_preprocessing, profile_dataset, DataProfile};
use crate::report::{self, Report};
use crate::training::{
    compute_metrics, predict_physical, prepare_data, resume, train, LearnerFaults, LoopOptions, ModelLearner,
    PreparedData, Provenance, StopReason, TrainConfig, TrainOutcome, TrainResult,
};
use crate::zoo::{estimate_memory, model_card, spec_from_assignment, Family, MemoryEstimate, Model, ModelSpec};
use crate::{CoreError, Qoi, Result};

/// Reproducible failures for exercising the recovery paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// NaN training loss in the second epoch of round 1's full training.
    NanRound1,
    /// The first committed architecture never learns (zero learning rate).
    Plateau,
    /// Gradients of round 1's full training scaled far past the explosion threshold.
    GradExplosion,
}

impl Fault {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nan-round-1" => Ok(Self::NanRound1),
            "plateau" => Ok(Self::Plateau),
            "grad-explosion" => Ok(Self::GradExplosion),
            other => Err(CoreError::Config(format!(
                "unknown fault `{other}` (expected nan-round-1, plateau or grad-explosion)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NanRound1 => "nan-round-1",
            Self::Plateau => "plateau",
            Self::GradExplosion => "grad-explosion",
        }
    }
}

const EXPLOSION_SCALE: f64 = 1e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub qois: Vec<Qoi>,
    pub instruction: Option<String>,
    pub reasoner: ReasonerConfig,
    pub budgets: ControlBudgets,
    pub hpo: HpoBudget,
    pub sampler: SamplerKind,
    pub pruner: PrunerConfig,
    /// Full-training epoch cap and patience.
    pub train_epochs: u32,
    pub patience: u32,
    /// Largest `base_channels` value the search may pick.
    pub max_base_channels: i64,
    pub memory_budget_bytes: usize,
    pub seed: u64,
    pub inject: Option<Fault>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            qois: Qoi::ALL.to_vec(),
            instruction: None,
            reasoner: ReasonerConfig::default(),
            budgets: ControlBudgets {
                max_rounds_per_qoi: 4,
                e_extra: 10,
                max_arch_switches: 7,
            },
            hpo: HpoBudget {
                n_trials: 6,
                epochs_per_trial: 3,
                train_batches: 20,
                val_batches: 8,
            },
            sampler: SamplerKind::Tpe,
            pruner: PrunerConfig::default(),
            train_epochs: 30,
            patience: 10,
            max_base_channels: 16,
            memory_budget_bytes: 2 << 30,
            seed: 0,
            inject: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qois.is_empty() {
            return Err(CoreError::Config("at least one quantity of interest is required".into()));
        }
        let mut seen = self.qois.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.qois.len() {
            return Err(CoreError::Config(format!("duplicate quantities of interest in {:?}", self.qois)));
        }
        self.budgets.validate()?;
        self.reasoner.validate()?;
        if self.hpo.n_trials == 0 || self.hpo.epochs_per_trial == 0 || self.hpo.train_batches == 0 || self.hpo.val_batches == 0 {
            return Err(CoreError::Config("HPO budget entries must be positive".into()));
        }
        if self.train_epochs == 0 || self.patience == 0 {
            return Err(CoreError::Config("train_epochs and patience must be positive".into()));
        }
        if self.max_base_channels < 8 {
            return Err(CoreError::Config(format!(
                "max_base_channels {} leaves no base_channels choice",
                self.max_base_channels
            )));
        }
        if self.memory_budget_bytes == 0 {
            return Err(CoreError::Config("memory budget must be positive".into()));
        }
        Ok(())
    }
}

fn reasoner_for(cfg: &ReasonerConfig, run_dir: &Path) -> Result<(Box<dyn Reasoner>, Option<String>)> {
    match cfg.backend {
        Backend::Scripted => Ok((Box::new(ScriptedReasoner), None)),
        Backend::Llm => {
            let mut llm = LlmReasoner::new(cfg.clone(), Some(run_dir.join("llm")))?;
            match llm.probe() {
                Ok(()) => Ok((Box::new(llm), None)),
                Err(e) if cfg.fallback_to_scripted => Ok((Box::new(ScriptedReasoner), Some(e.to_string()))),
                Err(e) => Err(CoreError::Config(format!("reasoning endpoint unreachable and fallback disabled: {e}"))),
            }
        }
    }
}

/// Seconds since the run started.
struct Clock(Instant);

impl Clock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    run_dir: PathBuf,
    ctx: SharedContext,
    reasoner: Box<dyn Reasoner>,
    clock: Clock,
    bundle: DatasetBundle,
    profile: DataProfile,
    /// Deployed quantities with their fallback reason, audited at reporting time.
    pending_deploy: Vec<(Qoi, Option<String>)>,
}

fn qoi_index(q: Qoi) -> u64 {
    match q {
        Qoi::Pressure => 0,
        Qoi::Saturation => 1,
    }
}

fn real(hp: &Assignment, name: &str, default: f64) -> f64 {
    hp.get(name).and_then(Value::as_f64).unwrap_or(default)
}

fn int(hp: &Assignment, name: &str, default: i64) -> i64 {
    hp.get(name).and_then(Value::as_i64).unwrap_or(default)
}

/// Training configuration from a hyperparameter assignment.
fn train_config(hp: &Assignment, grad_clip: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::pipeline(
        real(hp, hpo::LR, 1e-3),
        real(hp, hpo::WEIGHT_DECAY, 1e-5),
        int(hp, hpo::BATCH_SIZE, 4).max(1) as usize,
        seed,
    );
    cfg.grad_clip_norm = grad_clip;
    cfg.lambda_bce = real(hp, hpo::LAMBDA_BCE, 0.0);
    cfg
}

/// The card's search space with `base_channels` capped. The auxiliary BCE
/// weight only applies to saturation.
fn desk_space(family: Family, qoi: Qoi, max_bc: i64) -> SearchSpace {
    let mut space = model_card(family).search_space;
    if qoi == Qoi::Pressure {
        space.remove(hpo::LAMBDA_BCE);
    }
    if let Some(Domain::Categorical { values }) = space.get(hpo::BASE_CHANNELS).cloned() {
        let kept: Vec<Value> = values
            .into_iter()
            .filter(|v| v.as_i64().is_some_and(|b| b <= max_bc))
            .collect();
        space.set(hpo::BASE_CHANNELS, Domain::Categorical { values: kept });
    }
    space
}

fn probe_hp() -> Assignment {
    let mut hp = Assignment::new();
    hp.insert(hpo::BASE_CHANNELS.into(), Value::Int(16));
    hp.insert(hpo::BATCH_SIZE.into(), Value::Int(1));
    hp
}

/// One evaluated checkpoint together with its weights.
struct Evaluated {
    quality: Option<f64>,
    weights_ref: Option<String>,
}

/// The live state of the current card's training.
struct Current {
    learner: ModelLearner,
    outcome: TrainOutcome,
    hp: Assignment,
}

struct BestWeights {
    params: ParamStore,
    spec: ModelSpec,
    hp: Assignment,
}

impl Run<'_> {
    fn log(&mut self, entry: AuditEntry) -> u64 {
        let t = self.clock.now();
        self.ctx.log(entry, t)
    }

    fn decide(&mut self, stage: Stage, req: &DecisionRequest) -> Result<Decision> {
        let d = self.reasoner.decide(req)?;
        if let Some(why) = &d.fallback {
            let mut e = AuditEntry::new(stage, "reasoner", "reasoner_fallback").rationale(why.clone());
            if let Some(q) = req.qoi {
                e = e.qoi(q);
            }
            self.log(e);
        }
        Ok(d)
    }

    fn request(&self, stage: ReasonStage, qoi: Option<Qoi>, candidates: Vec<Family>) -> DecisionRequest {
        DecisionRequest {
            stage,
            qoi,
            profile_text: self.profile.describe(),
            fraction_near_zero: qoi.and_then(|q| self.profile.sparsity(q)),
            candidates,
            history: Vec::new(),
            diagnosis: None,
        }
    }

    fn probe(&self, family: Family) -> MemoryEstimate {
        let m = &self.bundle.manifest;
        estimate_memory(family, &probe_hp(), m.grid.dims(), m.timesteps, 1, self.cfg.memory_budget_bytes)
    }

    fn analyse(&mut self) -> Result<()> {
        let parsed = match &self.cfg.instruction {
            Some(text) => parse_instruction(text),
            None => parse_instruction(""),
        };
        self.ctx.targets = parsed.targets.clone();
        let mut e = AuditEntry::new(Stage::DataAnalysis, "orchestrator", "parse_instruction")
            .payload("targets")
            .detail(serde_json::to_value(&parsed.targets)?);
        if !parsed.warnings.is_empty() {
            e = e.rationale(parsed.warnings.join("; "));
        }
        self.log(e);
        self.ctx.dataset = Some(self.bundle.manifest.clone());
        self.ctx.data_profile = Some(self.profile.clone());
        let detail = json!({
            "n_samples": self.profile.n_samples,
            "timesteps": self.profile.timesteps,
            "fraction_near_zero": Qoi::ALL.iter().map(|&q| (q.as_str(), self.profile.sparsity(q))).collect::<BTreeMap<_, _>>(),
        });
        self.log(
            AuditEntry::new(Stage::DataAnalysis, "data_analysis", "profile_dataset")
                .payload("data_profile")
                .detail(detail),
        );
        let req = self.request(ReasonStage::Preprocessing, None, Vec::new());
        let d = self.decide(Stage::DataAnalysis, &req)?;
        let pre = configure_preprocessing(&self.profile)?;
        self.ctx.preprocessing = Some(pre);
        let rationale = d.document.get("rationale").and_then(Json::as_str).unwrap_or_default().to_string();
        self.log(
            AuditEntry::new(Stage::DataAnalysis, "data_analysis", "configure_preprocessing")
                .payload("preprocessing")
                .rationale(rationale)
                .detail(d.document),
        );
        Ok(())
    }

    /// Runs the model-selection agent loop for `qoi`.
    fn select(&mut self, qoi: Qoi) -> Result<ArchitectureSelection> {
        let req = self.request(ReasonStage::Ranking, Some(qoi), Family::ALL.to_vec());
        let mut estimates: BTreeMap<Family, MemoryEstimate> = BTreeMap::new();
        let mut ranking: Vec<Family> = Vec::new();
        let mut rationale = String::new();
        let mut decisions: Vec<Decision> = Vec::new();
        let mut selection: Option<ArchitectureSelection> = None;
        let mut steps: Vec<(String, Observation)> = Vec::new();
        let max_steps = self.cfg.reasoner.max_steps.max(3);
        let outcome = {
            let reasoner = &mut self.reasoner;
            let probe = |f: Family| {
                let m = &self.bundle.manifest;
                estimate_memory(f, &probe_hp(), m.grid.dims(), m.timesteps, 1, self.cfg.memory_budget_bytes)
            };
            let mut tools = |tool: &str, args: &Json| -> Result<Json> {
                match tool {
                    "rank" => {
                        let d = reasoner.decide(&req)?;
                        ranking = ranking_of(&d.document, &req.candidates);
                        rationale = d.document.get("rationale").and_then(Json::as_str).unwrap_or_default().to_string();
                        let out = json!({
                            "ranking": ranking.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
                            "rationale": rationale,
                        });
                        decisions.push(d);
                        Ok(out)
                    }
                    "estimate_memory" => {
                        let name = args.get("card").and_then(Json::as_str).unwrap_or_default();
                        let fam = Family::parse(name)
                            .ok_or_else(|| CoreError::Parameter(format!("unknown architecture `{name}`")))?;
                        let est = estimates.entry(fam).or_insert_with(|| probe(fam)).clone();
                        Ok(serde_json::to_value(est)?)
                    }
                    "commit" => {
                        let sel = select_architecture(qoi, &ranking, &rationale, |f| {
                            estimates.entry(f).or_insert_with(|| probe(f)).clone()
                        })?;
                        let out = json!({ "card": sel.card.as_str() });
                        selection = Some(sel);
                        Ok(out)
                    }
                    other => Err(CoreError::Reasoner(format!("unknown tool `{other}`"))),
                }
            };
            let mut policy = model_selection_policy;
            agent_loop(max_steps, &mut policy, &mut tools, &mut |_, thought, obs| {
                steps.push((thought.to_string(), obs.clone()))
            })
        };
        for d in &decisions {
            if let Some(why) = &d.fallback {
                self.log(
                    AuditEntry::new(Stage::ModelSelection, "reasoner", "reasoner_fallback")
                        .qoi(qoi)
                        .rationale(why.clone()),
                );
            }
        }
        for (thought, obs) in steps {
            let result = match &obs.result {
                Ok(v) => json!({ "ok": v }),
                Err(e) => json!({ "error": e }),
            };
            let mut e = AuditEntry::new(Stage::ModelSelection, "model_selection", &obs.tool)
                .qoi(qoi)
                .rationale(thought)
                .detail(json!({ "args": obs.args, "result": result }));
            if obs.tool == "commit" {
                e = e.payload(format!("selections.{qoi}"));
            }
            self.log(e);
        }
        match selection {
            Some(sel) if outcome.complete => Ok(sel),
            _ => {
                let listing: Vec<String> = Family::ALL
                    .iter()
                    .map(|&f| {
                        let est = estimates.get(&f).cloned().unwrap_or_else(|| self.probe(f));
                        format!(
                            "{f}: {} bytes{}",
                            est.estimated_bytes,
                            est.reason.map(|r| format!(" ({r})")).unwrap_or_default()
                        )
                    })
                    .collect();
                Err(CoreError::Config(format!(
                    "model selection for {qoi} failed ({}); estimates: {}",
                    outcome.abort_reason.unwrap_or_else(|| "no commit".into()),
                    listing.join("; ")
                )))
            }
        }
    }

    fn study(
        &mut self,
        qoi: Qoi,
        round: u32,
        card: Family,
        space: &SearchSpace,
        data: &Arc<PreparedData>,
        faults: LearnerFaults,
    ) -> Result<hpo::StudyRecord> {
        let m = &self.bundle.manifest;
        let dims = m.grid.dims();
        let t = m.timesteps;
        let seed = sample_seed(self.cfg.seed, 1000 * qoi_index(qoi) + round as u64);
        let budget = self.cfg.hpo;
        let clip = space.constraints.grad_clip;
        let mut study = hpo::run_study(
            card.as_str(),
            space,
            budget,
            self.cfg.pruner,
            self.cfg.sampler,
            seed,
            |hp, rep| {
                let trial_seed = sample_seed(seed, rep.trial_id() as u64);
                let spec = match spec_from_assignment(card, hp, dims, t) {
                    Ok(s) => s,
                    Err(e) => return TrialOutcome::Failed(e.to_string()),
                };
                let model = match Model::build(&spec, trial_seed) {
                    Ok(m) => m,
                    Err(e) => return TrialOutcome::Failed(e.to_string()),
                };
                let mut tc = train_config(hp, clip, trial_seed);
                tc.max_epochs = budget.epochs_per_trial;
                tc.train_batches = Some(budget.train_batches);
                tc.val_batches = Some(budget.val_batches);
                let mut learner = match ModelLearner::new(model, &tc, data.clone(), faults) {
                    Ok(l) => l,
                    Err(e) => return TrialOutcome::Failed(e.to_string()),
                };
                let opts = LoopOptions {
                    epochs: budget.epochs_per_trial,
                    patience: budget.epochs_per_trial,
                    provenance: Provenance {
                        card: card.as_str().into(),
                        hp: hp.clone(),
                        round,
                    },
                };
                let out = train(&mut learner, &opts, &mut |rec| rep.report(rec.epoch, rec.val_loss));
                match out.result.stopped_reason {
                    StopReason::Pruned => TrialOutcome::Pruned,
                    StopReason::Instability => TrialOutcome::Failed(
                        out.result
                            .instability
                            .first()
                            .map_or_else(|| "instability".to_string(), |e| e.detail.clone()),
                    ),
                    _ => {
                        let best = out
                            .result
                            .history
                            .iter()
                            .map(|r| r.val_loss)
                            .filter(|v| v.is_finite())
                            .fold(f64::INFINITY, f64::min);
                        if best.is_finite() {
                            TrialOutcome::Completed(best)
                        } else {
                            TrialOutcome::Failed("no finite validation loss".into())
                        }
                    }
                }
            },
        )?;
        study.round = round;
        write_file(
            &self.run_dir.join(format!("studies/{qoi}-{round}.json")),
            &serde_json::to_vec_pretty(&study)?,
        )?;
        Ok(study)
    }

    /// Saves weights under `checkpoints/<qoi>/<round>-<tag>.bin` and returns the ref.
    fn save_weights(&self, qoi: Qoi, round: u32, tag: &str, w: &ParamStore) -> Result<String> {
        let rel = format!("checkpoints/{qoi}/{round}-{tag}.bin");
        let bin = self.run_dir.join(&rel);
        let manifest = self.run_dir.join(format!("checkpoints/{qoi}/{round}-{tag}.json"));
        if let Some(p) = bin.parent() {
            std::fs::create_dir_all(p).map_err(|e| CoreError::io(p, e))?;
        }
        w.save(&bin, &manifest)?;
        Ok(rel)
    }

    /// Persists checkpoints and history for `round` and scores the best weights.
    fn record_round(&mut self, qoi: Qoi, round: u32, cur: &mut Current, data: &PreparedData) -> Result<Evaluated> {
        cur.outcome.result.checkpoints.provenance.round = round;
        let mut best_ref = None;
        if let Some(w) = &cur.outcome.best_weights {
            let r = self.save_weights(qoi, round, "best", w)?;
            if let Some(b) = cur.outcome.result.checkpoints.best.as_mut() {
                b.weights_ref = Some(r.clone());
            }
            best_ref = Some(r);
        }
        if let Some(w) = &cur.outcome.final_weights {
            let r = self.save_weights(qoi, round, "final", w)?;
            if let Some(f) = cur.outcome.result.checkpoints.final_.as_mut() {
                f.weights_ref = Some(r);
            }
        }
        let mut lines = Vec::new();
        for rec in &cur.outcome.result.history {
            serde_json::to_writer(&mut lines, rec)?;
            lines.push(b'\n');
        }
        write_file(&self.run_dir.join(format!("history/{qoi}-{round}.jsonl")), &lines)?;
        let mut metrics = None;
        if let (Some(w), Some(_)) = (&cur.outcome.best_weights, &best_ref) {
            let pred = predict_physical(&cur.learner.model, w, data, &data.val);
            let truth = data.truth_physical(&data.val);
            match compute_metrics(&pred, &truth, data.val.len()) {
                Ok(m) if m.r2.is_finite() && m.rmse.is_finite() && m.rel_l2.is_finite() => metrics = Some(m),
                Ok(_) => {}
                Err(e) => self.ctx.errors.push(ErrorTrace {
                    qoi: Some(qoi),
                    round: Some(round),
                    message: e.to_string(),
                }),
            }
        }
        cur.outcome.result.eval = metrics;
        Ok(Evaluated {
            quality: metrics.map(|m| m.r2),
            weights_ref: best_ref,
        })
    }

    fn push_result(&mut self, qoi: Qoi, result: TrainResult) -> usize {
        let list = self.ctx.train_results.entry(qoi).or_default();
        list.push(result);
        list.len() - 1
    }

    fn offer_best(
        &mut self,
        qoi: Qoi,
        stage: Stage,
        round: u32,
        card: Family,
        ev: &Evaluated,
        cur: &Current,
        best: &mut Option<BestWeights>,
    ) {
        let (Some(q), Some(r), Some(w)) = (ev.quality, &ev.weights_ref, &cur.outcome.best_weights) else {
            return;
        };
        let mut slot = self.ctx.global_best.get(&qoi).cloned();
        let cand = GlobalBestEntry {
            checkpoint_ref: r.clone(),
            quality: q,
            round,
            card,
        };
        if update_global_best(&mut slot, cand) {
            let entry = slot.expect("just stored");
            self.ctx.global_best.insert(qoi, entry.clone());
            *best = Some(BestWeights {
                params: w.clone(),
                spec: cur.learner.model.spec.clone(),
                hp: cur.hp.clone(),
            });
            self.log(
                AuditEntry::new(stage, "hpo_training", "update_global_best")
                    .qoi(qoi)
                    .payload(format!("global_best.{qoi}"))
                    .detail(serde_json::to_value(&entry).unwrap_or_default()),
            );
        }
    }

    fn narrate(&mut self, qoi: Qoi, diagnosis: &Diagnosis) -> Result<String> {
        let mut req = self.request(ReasonStage::DiagnosisNarration, Some(qoi), Vec::new());
        req.diagnosis = Some(serde_json::to_value(diagnosis)?);
        let d = self.decide(Stage::SelfCorrection, &req)?;
        Ok(d.document.get("narrative").and_then(Json::as_str).unwrap_or_default().to_string())
    }

    /// Re-ranks the remaining cards with the performance history as evidence.
    fn rerank(&mut self, qoi: Qoi, remaining: Vec<Family>, history: &[(Family, Option<f64>)]) -> Result<Vec<Family>> {
        if remaining.is_empty() {
            return Ok(remaining);
        }
        let mut req = self.request(ReasonStage::SwitchRanking, Some(qoi), remaining);
        req.history = history.to_vec();
        let d = self.decide(Stage::SelfCorrection, &req)?;
        let order = ranking_of(&d.document, &req.candidates);
        self.log(
            AuditEntry::new(Stage::SelfCorrection, "model_selection", "switch_ranking")
                .qoi(qoi)
                .rationale(d.document.get("rationale").and_then(Json::as_str).unwrap_or_default())
                .detail(json!({ "ranking": order.iter().map(|f| f.as_str()).collect::<Vec<_>>() })),
        );
        Ok(order)
    }

    fn status(quality: Option<f64>, target: &TargetSpec, unstable: bool) -> String {
        match quality {
            _ if unstable => "Unstable".into(),
            None => "Failed".into(),
            Some(q) if meets_quality(q, target) => "Target met".into(),
            Some(_) if target.mode == TargetMode::Maximize => "Evaluated".into(),
            Some(_) => "Below target".into(),
        }
    }

    fn row(&mut self, qoi: Qoi, round: u32, kind: RowKind, strategy: String, card: Family, r2: Option<f64>, status: String) {
        self.ctx.timeline.entry(qoi).or_default().push(TimelineRow {
            round,
            round_label: round.to_string(),
            kind,
            strategy,
            card,
            r2,
            status,
        });
    }

    /// The HPO / training / self-correction loop for one quantity of interest.
    fn optimise(&mut self, qoi: Qoi) -> Result<()> {
        let pre = self.ctx.preprocessing.expect("preprocessing configured");
        let data = Arc::new(prepare_data(&self.bundle, qoi, &pre)?);
        let target = self.ctx.targets.get(qoi);
        let selection = self.ctx.selections.get(&qoi).cloned().expect("selection committed");
        let mut card = selection.card;
        let mut alternatives = selection.alternatives_ranked.clone();
        let mut tried = vec![card];
        let mut perf: Vec<(Family, Option<f64>)> = Vec::new();
        let mut tightening: Option<(f64, f64)> = None;
        let mut switches = 0u32;
        let mut consecutive_unstable = 0u32;
        let mut round = 1u32;
        let mut kind = RowKind::Initial;
        let mut best: Option<BestWeights> = None;
        let lr_floor = match model_card(card).search_space.get(hpo::LR) {
            Some(Domain::LogUniform { lo, .. }) => *lo,
            _ => 1e-5,
        };
        let mut fallback_reason: Option<String> = None;
        'rounds: loop {
            let first_card = tried.len() == 1;
            let faults = LearnerFaults {
                zero_lr: self.cfg.inject == Some(Fault::Plateau) && first_card,
                ..LearnerFaults::default()
            };
            let mut space = desk_space(card, qoi, self.cfg.max_base_channels);
            if let Some((lr_cap, clip)) = tightening {
                space = hpo::tighten_space(&space, lr_cap, clip)?;
            }
            let study = self.study(qoi, round, card, &space, &data, faults)?;
            let completed = study.count(hpo::TrialState::Completed);
            let studies = self.ctx.studies.entry(qoi).or_default();
            studies.push(study.clone());
            let sidx = studies.len() - 1;
            self.log(
                AuditEntry::new(Stage::Hpo, "hpo_training", "hpo_study")
                    .qoi(qoi)
                    .payload(format!("studies.{qoi}[{sidx}]"))
                    .detail(json!({
                        "round": round,
                        "card": card.as_str(),
                        "completed": completed,
                        "pruned": study.count(hpo::TrialState::Pruned),
                        "failed": study.count(hpo::TrialState::Failed),
                        "best_trial": study.best_trial,
                        "lr_cap": space.constraints.lr_upper_bound,
                        "grad_clip": space.constraints.grad_clip,
                    })),
            );
            let strategy = match kind {
                RowKind::Initial => "Initial HPO and training".to_string(),
                _ => "Fresh HPO and training".to_string(),
            };
            let mut cur: Option<Current> = None;
            let mut ev = Evaluated {
                quality: None,
                weights_ref: None,
            };
            let mut unstable_result = false;
            match study.best() {
                None => {
                    self.log(
                        AuditEntry::new(Stage::Training, "hpo_training", "training_skipped")
                            .qoi(qoi)
                            .rationale("no HPO trial completed")
                            .payload(format!("studies.{qoi}[{sidx}]")),
                    );
                }
                Some(best_trial) => {
                    let hp = best_trial.params.clone();
                    let seed = sample_seed(self.cfg.seed, 1_000_000 + 1000 * qoi_index(qoi) + round as u64);
                    let spec = spec_from_assignment(card, &hp, data.dims, data.timesteps)?;
                    let model = Model::build(&spec, seed)?;
                    let mut tc = train_config(&hp, space.constraints.grad_clip, seed);
                    tc.max_epochs = self.cfg.train_epochs;
                    tc.patience = self.cfg.patience;
                    let mut f = faults;
                    if round == 1 {
                        match self.cfg.inject {
                            Some(Fault::NanRound1) => f.nan_loss_epoch = Some(2),
                            Some(Fault::GradExplosion) => f.grad_scale = EXPLOSION_SCALE,
                            _ => {}
                        }
                    }
                    let mut learner = ModelLearner::new(model, &tc, data.clone(), f)?;
                    let opts = LoopOptions {
                        epochs: tc.max_epochs,
                        patience: tc.patience,
                        provenance: Provenance {
                            card: card.as_str().into(),
                            hp: hp.clone(),
                            round,
                        },
                    };
                    let outcome = train(&mut learner, &opts, &mut |_| false);
                    // Faults apply to the faulty run only.
                    learner.set_faults(faults);
                    let mut c = Current { learner, outcome, hp };
                    ev = self.record_round(qoi, round, &mut c, &data)?;
                    unstable_result = !c.outcome.result.instability.is_empty();
                    let ridx = self.push_result(qoi, c.outcome.result.clone());
                    self.log(
                        AuditEntry::new(Stage::Training, "hpo_training", "train")
                            .qoi(qoi)
                            .payload(format!("train_results.{qoi}[{ridx}]"))
                            .detail(json!({
                                "round": round,
                                "card": card.as_str(),
                                "hp": c.hp,
                                "epochs": c.outcome.result.last_epoch(),
                                "stopped_reason": c.outcome.result.stopped_reason,
                                "val_r2": ev.quality,
                            })),
                    );
                    self.offer_best(qoi, Stage::Training, round, card, &ev, &c, &mut best);
                    cur = Some(c);
                }
            }
            let status = Self::status(ev.quality, &target, unstable_result || cur.is_none());
            self.row(qoi, round, if kind == RowKind::Initial { RowKind::Initial } else { RowKind::Retrain }, strategy, card, ev.quality, status);
            if ev.quality.is_some_and(|q| meets_quality(q, &target)) {
                break 'rounds;
            }

            let mut continuation_used = false;
            let mut previous_quality: Option<f64> = None;
            loop {
                let last_result = self.ctx.train_results.get(&qoi).and_then(|v| v.last()).filter(|_| cur.is_some());
                let diag = diagnose(&DiagnoseInput {
                    result: last_result,
                    study: Some(&study),
                    quality: ev.quality,
                    previous_quality,
                    continuation_used,
                    target,
                });
                if diag.state == DiagnosisState::Unstable {
                    consecutive_unstable += 1;
                } else {
                    consecutive_unstable = 0;
                }
                let narrative = self.narrate(qoi, &diag)?;
                self.log(
                    AuditEntry::new(Stage::SelfCorrection, "hpo_training", "diagnose")
                        .qoi(qoi)
                        .rationale(narrative.clone())
                        .detail(serde_json::to_value(&diag)?),
                );
                let state = CorrectionState {
                    diagnosis: &diag,
                    card,
                    budgets: self.cfg.budgets,
                    rounds_used: round,
                    switches_used: switches,
                    continuation_used,
                    consecutive_unstable,
                    alternatives: &alternatives,
                    tried: &tried,
                    tightening,
                    lr_floor,
                };
                let mut action = self_correct(&state);
                if let RecoveryAction::ArchitectureSwitch { from, .. } = action {
                    perf.push((card, self.ctx.global_best.get(&qoi).filter(|g| g.card == card).map(|g| g.quality).or(ev.quality)));
                    let remaining: Vec<Family> = alternatives.iter().copied().filter(|c| !tried.contains(c)).collect();
                    let order = self.rerank(qoi, remaining, &perf)?;
                    let mut pick = None;
                    for f in order.iter().copied() {
                        let est = self.probe(f);
                        if est.feasible {
                            pick = Some(f);
                            break;
                        }
                        self.log(
                            AuditEntry::new(Stage::SelfCorrection, "model_selection", "demote")
                                .qoi(qoi)
                                .rationale(est.reason.unwrap_or_else(|| "infeasible".into()))
                                .detail(json!({ "card": f.as_str() })),
                        );
                        tried.push(f);
                    }
                    alternatives = order.into_iter().filter(|f| !tried.contains(f)).collect();
                    action = match pick {
                        Some(to) => RecoveryAction::ArchitectureSwitch { from, to },
                        None => RecoveryAction::GlobalBestFallback {
                            reason: "no feasible architecture left to switch to".into(),
                        },
                    };
                }
                self.log(
                    AuditEntry::new(Stage::SelfCorrection, "hpo_training", action.name())
                        .qoi(qoi)
                        .rationale(narrative)
                        .detail(serde_json::to_value(&action)?),
                );
                match action {
                    RecoveryAction::Continuation { epochs } => {
                        let Some(mut c) = cur.take() else {
                            fallback_reason = Some("nothing to continue".into());
                            break 'rounds;
                        };
                        round += 1;
                        previous_quality = ev.quality;
                        let prior = c.outcome;
                        c.outcome = resume(&mut c.learner, prior, epochs, self.cfg.patience);
                        ev = self.record_round(qoi, round, &mut c, &data)?;
                        let ridx = self.push_result(qoi, c.outcome.result.clone());
                        self.log(
                            AuditEntry::new(Stage::SelfCorrection, "hpo_training", "continue_training")
                                .qoi(qoi)
                                .payload(format!("train_results.{qoi}[{ridx}]"))
                                .detail(json!({
                                    "round": round,
                                    "card": card.as_str(),
                                    "extra_epochs": epochs,
                                    "val_r2": ev.quality,
                                })),
                        );
                        self.offer_best(qoi, Stage::SelfCorrection, round, card, &ev, &c, &mut best);
                        let unstable = !c.outcome.result.instability.is_empty();
                        let plateau = matches!((ev.quality, previous_quality), (Some(q), Some(p)) if q - p <= PLATEAU_TOL);
                        let status = if plateau && !ev.quality.is_some_and(|q| meets_quality(q, &target)) {
                            "Plateau".to_string()
                        } else {
                            Self::status(ev.quality, &target, unstable)
                        };
                        self.row(qoi, round, RowKind::Continuation, format!("Continuation (+{epochs} epochs)"), card, ev.quality, status);
                        cur = Some(c);
                        continuation_used = true;
                        if ev.quality.is_some_and(|q| meets_quality(q, &target)) {
                            break 'rounds;
                        }
                    }
                    RecoveryAction::StabilityRestart { lr_cap, grad_clip } => {
                        tightening = Some((lr_cap, grad_clip));
                        round += 1;
                        kind = RowKind::Restart;
                        self.row(
                            qoi,
                            round,
                            RowKind::Restart,
                            format!("Stability restart (lr <= {lr_cap:.1e}, clip {grad_clip})"),
                            card,
                            None,
                            "Restarted".into(),
                        );
                        continue 'rounds;
                    }
                    RecoveryAction::ArchitectureSwitch { from, to } => {
                        card = to;
                        tried.push(to);
                        alternatives.retain(|f| *f != to);
                        switches += 1;
                        tightening = None;
                        consecutive_unstable = 0;
                        round += 1;
                        kind = RowKind::Switch;
                        self.row(qoi, round, RowKind::Switch, format!("Switch {from} -> {to}"), to, None, "Switched".into());
                        continue 'rounds;
                    }
                    RecoveryAction::GlobalBestFallback { reason } => {
                        fallback_reason = Some(reason);
                        break 'rounds;
                    }
                }
            }
        }
        let gb = self.ctx.global_best.get(&qoi).cloned();
        let (Some(gb), Some(bw)) = (gb, best) else {
            self.ctx.errors.push(ErrorTrace {
                qoi: Some(qoi),
                round: Some(round),
                message: "no checkpoint could be evaluated; nothing to deploy".into(),
            });
            return Err(CoreError::Numerical(format!("no deployable checkpoint for {qoi}")));
        };
        if fallback_reason.is_some() {
            self.row(qoi, round, RowKind::Fallback, "Global-best fallback".into(), gb.card, Some(gb.quality), "Budget exhausted".into());
        }
        let deployment = Deployment {
            qoi,
            checkpoint_ref: gb.checkpoint_ref.clone(),
            card: gb.card,
            round: gb.round,
            val_quality: gb.quality,
            hp: bw.hp.clone(),
            spec: bw.spec.clone(),
            via_fallback: fallback_reason.is_some(),
        };
        let model = Model::build(&bw.spec, 0)?;
        let pred = predict_physical(&model, &bw.params, &data, &data.test);
        let truth = data.truth_physical(&data.test);
        let test = compute_metrics(&pred, &truth, data.test.len())?;
        self.ctx.deployed.insert(qoi, deployment);
        self.ctx.test_metrics.insert(qoi, test);
        self.pending_deploy.push((qoi, fallback_reason));
        Ok(())
    }
}

/// Executes the full pipeline into `cfg.out_dir` and writes the report.
/// `sources` records where each effective setting came from.
pub fn run_pipeline(cfg: &RunConfig, sources: BTreeMap<String, String>) -> Result<Report> {
    cfg.validate()?;
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| CoreError::io(&run_dir, e))?;
    let (reasoner, probe_failure) = reasoner_for(&cfg.reasoner, &run_dir)?;
    let bundle = read_dataset(&cfg.data_dir)?;
    let profile = profile_dataset(&bundle)?;
    let mut ctx = SharedContext::new(format!("run-{}", cfg.seed), Default::default());
    ctx.instruction = cfg.instruction.clone();
    ctx.data_dir = Some(cfg.data_dir.display().to_string());
    ctx.environment.seed = cfg.seed;
    ctx.environment.reasoner_backend = match reasoner.backend() {
        Backend::Scripted => "scripted".into(),
        Backend::Llm => "llm".into(),
    };
    ctx.environment.versions.insert("plume-core".into(), env!("CARGO_PKG_VERSION").into());
    ctx.environment.versions.insert("report_schema".into(), report::SCHEMA.into());
    ctx.environment.versions.insert("prompts".into(), crate::agents::PROMPT_VERSION.into());
    ctx.environment.config_sources = sources;
    ctx.environment.fault_injection = cfg.inject.map(|f| f.as_str().to_string());
    let mut run = Run {
        cfg,
        run_dir: run_dir.clone(),
        ctx,
        reasoner,
        clock: Clock(Instant::now()),
        bundle,
        profile,
        pending_deploy: Vec::new(),
    };
    if let Some(why) = probe_failure {
        run.log(AuditEntry::new(Stage::DataAnalysis, "reasoner", "reasoner_fallback").rationale(why));
    }
    let result = execute(&mut run);
    if let Err(e) = &result {
        run.ctx.errors.push(ErrorTrace {
            qoi: None,
            round: None,
            message: e.to_string(),
        });
        run.ctx.persist(&run_dir)?;
    }
    result
}

fn execute(run: &mut Run) -> Result<Report> {
    run.analyse()?;
    for &q in &run.cfg.qois {
        let sel = run.select(q)?;
        run.ctx.selections.insert(q, sel);
    }
    for &q in &run.cfg.qois {
        run.optimise(q)?;
    }
    for (q, reason) in std::mem::take(&mut run.pending_deploy) {
        let d = run.ctx.deployed[&q].clone();
        let mut e = AuditEntry::new(Stage::Reporting, "reporter", "deploy")
            .qoi(q)
            .payload(format!("deployed.{q}"))
            .detail(json!({
                "checkpoint_ref": d.checkpoint_ref,
                "card": d.card.as_str(),
                "round": d.round,
                "val_r2": d.val_quality,
                "via_fallback": d.via_fallback,
            }));
        if let Some(r) = reason {
            e = e.rationale(r);
        }
        run.log(e);
        run.log(
            AuditEntry::new(Stage::Reporting, "reporter", "evaluate_test")
                .qoi(q)
                .payload(format!("test_metrics.{q}"))
                .detail(serde_json::to_value(run.ctx.test_metrics[&q])?),
        );
    }
    run.log(AuditEntry::new(Stage::Reporting, "reporter", "consolidate").payload("report"));
    let report = report::consolidate(&run.ctx, &run.run_dir)?;
    report::write_report(&report, &run.run_dir)?;
    run.ctx.persist(&run.run_dir)?;
    for &q in &run.cfg.qois {
        report::plot_fields(&run.run_dir, q, 0, -1)?;
    }
    Ok(report)
}
