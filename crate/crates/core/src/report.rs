//! Consolidation of a run into a versioned JSON report, a markdown summary
//! and three-panel field plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plume_tensor::ParamStore;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::context::{EnvironmentInfo, ErrorTrace, SharedContext, Stage, TargetMode, TargetSpec};
use crate::control::{ArchitectureSelection, Deployment, GlobalBestEntry, TimelineRow};
use crate::datagen::{read_dataset, Manifest};
use crate::error::write_file;
use crate::hpo::{Assignment, SamplerKind, StudyRecord, TrialState};
use crate::profiling::PreprocessingConfig;
use crate::training::{predict_physical, prepare_data, EpochRecord, InstabilityEvent, Metrics, StopReason, TrainResult};
use crate::zoo::Model;
use crate::{CoreError, Qoi, Result};

pub const SCHEMA: &str = "plume.report/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: u32,
    pub state: TrialState,
    pub value: Option<f64>,
    pub steps_reported: usize,
    pub params: Assignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub key: String,
    pub round: u32,
    pub card: String,
    pub sampler: SamplerKind,
    pub n_trials: usize,
    pub completed: usize,
    pub pruned: usize,
    pub failed: usize,
    pub best_trial: Option<u32>,
    pub best_value: Option<f64>,
    pub best_params: Option<Assignment>,
    pub lr_upper_bound: Option<f64>,
    pub grad_clip: f64,
    pub trials: Vec<TrialSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub key: String,
    pub round: u32,
    pub card: String,
    pub hp: Assignment,
    pub epochs: u32,
    pub stopped_reason: StopReason,
    pub best_epoch: Option<u32>,
    pub best_score: Option<f64>,
    pub best_checkpoint: Option<String>,
    pub final_checkpoint: Option<String>,
    pub instability: Vec<InstabilityEvent>,
    pub val_metrics: Option<Metrics>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoiSection {
    pub target: TargetSpec,
    pub selection: ArchitectureSelection,
    pub studies: Vec<StudySummary>,
    pub trainings: Vec<TrainingSummary>,
    pub timeline: Vec<TimelineRow>,
    pub global_best: GlobalBestEntry,
    pub deployed: Deployment,
    pub test_metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub seq: u64,
    pub stage: Stage,
    pub actor: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qoi: Option<Qoi>,
    pub payload_ref: String,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditDigest {
    pub n_events: usize,
    pub by_stage: BTreeMap<String, usize>,
    pub events: Vec<DigestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptInfo {
    pub version: String,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub run_id: String,
    pub instruction: Option<String>,
    pub dataset_config: Manifest,
    pub preprocessing: PreprocessingConfig,
    pub qois: BTreeMap<Qoi, QoiSection>,
    pub error_traces: Vec<ErrorTrace>,
    pub audit_digest: AuditDigest,
    pub environment: EnvironmentInfo,
    pub prompts: PromptInfo,
}

fn stage_name(s: Stage) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Follows a dotted key such as `studies.pressure[0]` into a JSON document.
pub fn resolve_key<'a>(doc: &'a Json, key: &str) -> Option<&'a Json> {
    let mut cur = doc;
    for seg in key.split('.') {
        let (name, index) = match seg.find('[') {
            Some(p) if seg.ends_with(']') => (&seg[..p], Some(seg[p + 1..seg.len() - 1].parse::<usize>().ok()?)),
            Some(_) => return None,
            None => (seg, None),
        };
        cur = cur.get(name)?;
        if cur.is_null() {
            return None;
        }
        if let Some(i) = index {
            cur = cur.get(i)?;
        }
    }
    Some(cur)
}

fn summarize_study(qoi: Qoi, i: usize, s: &StudyRecord) -> StudySummary {
    let best = s.best();
    StudySummary {
        key: format!("studies.{qoi}[{i}]"),
        round: s.round,
        card: s.card.clone(),
        sampler: s.sampler,
        n_trials: s.trials.len(),
        completed: s.count(TrialState::Completed),
        pruned: s.count(TrialState::Pruned),
        failed: s.count(TrialState::Failed),
        best_trial: s.best_trial,
        best_value: best.and_then(|b| b.final_value),
        best_params: best.map(|b| b.params.clone()),
        lr_upper_bound: s.space.constraints.lr_upper_bound,
        grad_clip: s.space.constraints.grad_clip,
        trials: s
            .trials
            .iter()
            .map(|t| TrialSummary {
                trial_id: t.trial_id,
                state: t.state,
                value: t.final_value.or_else(|| t.intermediate.last().map(|v| v.1)).filter(|v| v.is_finite()),
                steps_reported: t.intermediate.len(),
                params: t.params.clone(),
            })
            .collect(),
    }
}

fn summarize_training(qoi: Qoi, i: usize, r: &TrainResult) -> TrainingSummary {
    let cp = &r.checkpoints;
    TrainingSummary {
        key: format!("train_results.{qoi}[{i}]"),
        round: cp.provenance.round,
        card: cp.provenance.card.clone(),
        hp: cp.provenance.hp.clone(),
        epochs: r.last_epoch(),
        stopped_reason: r.stopped_reason,
        best_epoch: cp.best.as_ref().map(|b| b.epoch),
        best_score: cp.best.as_ref().map(|b| b.score).filter(|v| v.is_finite()),
        best_checkpoint: cp.best.as_ref().and_then(|b| b.weights_ref.clone()),
        final_checkpoint: cp.final_.as_ref().and_then(|f| f.weights_ref.clone()),
        instability: r.instability.clone(),
        val_metrics: r.eval,
        history: r.history.clone(),
    }
}

fn check_artifact(run_dir: &Path, r: &str) -> Result<()> {
    if run_dir.join(r).is_file() {
        Ok(())
    } else {
        Err(CoreError::Consolidation(format!("checkpoint reference `{r}` does not resolve to a file")))
    }
}

/// Builds the report from the blackboard. Every audit payload reference must
/// resolve and every checkpoint reference must name a file under `run_dir`.
pub fn consolidate(ctx: &SharedContext, run_dir: &Path) -> Result<Report> {
    let doc = serde_json::to_value(ctx)?;
    for e in &ctx.audit {
        let key = e.payload_ref.as_str();
        if key.is_empty() || key == "report" {
            continue;
        }
        if resolve_key(&doc, key).is_none() {
            return Err(CoreError::Schema {
                field: key.to_string(),
                reason: format!("audit event {} references a missing context entry", e.seq),
            });
        }
    }
    let dataset_config = ctx.dataset.clone().ok_or_else(|| CoreError::Schema {
        field: "dataset".into(),
        reason: "missing".into(),
    })?;
    let preprocessing = ctx.preprocessing.ok_or_else(|| CoreError::Schema {
        field: "preprocessing".into(),
        reason: "missing".into(),
    })?;
    let mut qois = BTreeMap::new();
    for (&q, sel) in &ctx.selections {
        let missing = |what: &str| CoreError::Schema {
            field: format!("{what}.{q}"),
            reason: "missing".into(),
        };
        let deployed = ctx.deployed.get(&q).cloned().ok_or_else(|| missing("deployed"))?;
        let global_best = ctx.global_best.get(&q).cloned().ok_or_else(|| missing("global_best"))?;
        let test_metrics = *ctx.test_metrics.get(&q).ok_or_else(|| missing("test_metrics"))?;
        let studies = ctx.studies.get(&q).ok_or_else(|| missing("studies"))?;
        if studies.is_empty() {
            return Err(missing("studies"));
        }
        let results = ctx.train_results.get(&q).map(Vec::as_slice).unwrap_or_default();
        check_artifact(run_dir, &deployed.checkpoint_ref)?;
        check_artifact(run_dir, &global_best.checkpoint_ref)?;
        for r in results {
            if let Some(b) = r.checkpoints.best.as_ref().and_then(|b| b.weights_ref.as_ref()) {
                check_artifact(run_dir, b)?;
            }
            if let Some(f) = r.checkpoints.final_.as_ref().and_then(|f| f.weights_ref.as_ref()) {
                check_artifact(run_dir, f)?;
            }
        }
        qois.insert(
            q,
            QoiSection {
                target: ctx.targets.get(q),
                selection: sel.clone(),
                studies: studies.iter().enumerate().map(|(i, s)| summarize_study(q, i, s)).collect(),
                trainings: results.iter().enumerate().map(|(i, r)| summarize_training(q, i, r)).collect(),
                timeline: ctx.timeline.get(&q).cloned().unwrap_or_default(),
                global_best,
                deployed,
                test_metrics,
            },
        );
    }
    let mut by_stage = BTreeMap::new();
    for e in &ctx.audit {
        *by_stage.entry(stage_name(e.stage)).or_insert(0) += 1;
    }
    let report = Report {
        schema: SCHEMA.into(),
        run_id: ctx.run_id.clone(),
        instruction: ctx.instruction.clone(),
        dataset_config,
        preprocessing,
        qois,
        error_traces: ctx.errors.clone(),
        audit_digest: AuditDigest {
            n_events: ctx.audit.len(),
            by_stage,
            events: ctx
                .audit
                .iter()
                .map(|e| DigestEntry {
                    seq: e.seq,
                    stage: e.stage,
                    actor: e.actor.clone(),
                    action: e.action.clone(),
                    qoi: e.qoi,
                    payload_ref: e.payload_ref.clone(),
                    wall_time: e.wall_time,
                })
                .collect(),
        },
        environment: ctx.environment.clone(),
        prompts: PromptInfo {
            version: crate::agents::PROMPT_VERSION.into(),
            note: "Prompt templates are an original reconstruction; the published method does not include its prompts."
                .into(),
        },
    };
    validate(&report, run_dir)?;
    Ok(report)
}

/// Structural checks on a report.
pub fn validate(report: &Report, run_dir: &Path) -> Result<()> {
    if report.schema != SCHEMA {
        return Err(CoreError::Schema {
            field: "schema".into(),
            reason: format!("expected `{SCHEMA}`, found `{}`", report.schema),
        });
    }
    if report.qois.is_empty() {
        return Err(CoreError::Schema {
            field: "qois".into(),
            reason: "no quantity of interest reported".into(),
        });
    }
    for (q, s) in &report.qois {
        check_artifact(run_dir, &s.deployed.checkpoint_ref)?;
        if s.timeline.is_empty() {
            return Err(CoreError::Schema {
                field: format!("qois.{q}.timeline"),
                reason: "empty".into(),
            });
        }
        let mut expect = 1;
        for (i, row) in s.timeline.iter().enumerate() {
            if row.round != expect && row.round != expect + 1 {
                return Err(CoreError::Schema {
                    field: format!("qois.{q}.timeline[{i}].round"),
                    reason: format!("round {} breaks the contiguous sequence", row.round),
                });
            }
            if i == 0 && row.round != 1 {
                return Err(CoreError::Schema {
                    field: format!("qois.{q}.timeline[0].round"),
                    reason: "timeline must start at round 1".into(),
                });
            }
            expect = row.round;
        }
        if s.studies.iter().any(|st| st.trials.len() != st.n_trials) {
            return Err(CoreError::Schema {
                field: format!("qois.{q}.studies"),
                reason: "trial count mismatch".into(),
            });
        }
    }
    if report.audit_digest.n_events != report.audit_digest.events.len() {
        return Err(CoreError::Schema {
            field: "audit_digest.n_events".into(),
            reason: "count does not match the events listed".into(),
        });
    }
    Ok(())
}

pub fn to_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn from_json(text: &str) -> Result<Report> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_report(run_dir: &Path) -> Result<Report> {
    let path = run_dir.join("report.json");
    let bytes = crate::error::read_file(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes `report.json` and `report.md`.
pub fn write_report(report: &Report, run_dir: &Path) -> Result<()> {
    write_file(&run_dir.join("report.json"), to_json(report)?.as_bytes())?;
    write_file(&run_dir.join("report.md"), render_summary(report).as_bytes())
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

/// Scientific notation at three significant figures.
pub fn fmt_loss(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2e}")
    } else {
        "n/a".into()
    }
}

fn describe_target(t: &TargetSpec) -> String {
    match (t.mode, t.threshold) {
        (TargetMode::Threshold, Some(x)) => format!("R2 > {x}"),
        _ => "maximize R2".into(),
    }
}

fn fmt_hp(hp: &Assignment) -> String {
    hp.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
}

/// Markdown rendering of a report.
pub fn render_summary(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Surrogate report `{}`\n", report.run_id);
    if let Some(i) = &report.instruction {
        let _ = writeln!(s, "Instruction: \"{i}\"\n");
    }
    let m = &report.dataset_config;
    let g = m.grid.dims();
    let _ = writeln!(
        s,
        "Dataset: {} samples on a {}x{}x{} grid, {} timesteps (split {}/{}/{}).\n",
        m.n_samples,
        g[0],
        g[1],
        g[2],
        m.timesteps,
        m.split.train.len(),
        m.split.val.len(),
        m.split.test.len()
    );
    let _ = writeln!(s, "## Test metrics\n");
    let _ = writeln!(s, "| QoI | R2 | RMSE | RelL2 |");
    let _ = writeln!(s, "|---|---|---|---|");
    for (q, sec) in &report.qois {
        let t = &sec.test_metrics;
        let _ = writeln!(s, "| {q} | {} | {} | {} |", fmt_metric(t.r2), fmt_metric(t.rmse), fmt_metric(t.rel_l2));
    }
    let _ = writeln!(s, "\nPressure errors are in bar; saturation errors are volume fractions.\n");
    let _ = writeln!(s, "## Recovery timeline\n");
    let _ = writeln!(s, "| Task | Round | Strategy | Architecture | R2 | Status |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for (q, sec) in &report.qois {
        for row in &sec.timeline {
            let r2 = row.r2.map_or("-".to_string(), fmt_metric);
            let status = if row.status == "Budget exhausted" {
                format!("**{}**", row.status)
            } else {
                row.status.clone()
            };
            let _ = writeln!(s, "| {q} | {} | {} | {} | {r2} | {status} |", row.round_label, row.strategy, row.card);
        }
    }
    for (q, sec) in &report.qois {
        let _ = writeln!(s, "\n## {q}\n");
        let _ = writeln!(s, "Target: {}.\n", describe_target(&sec.target));
        let _ = writeln!(s, "Selected {}: {}\n", sec.selection.card, sec.selection.rationale);
        if !sec.selection.demoted.is_empty() {
            for d in &sec.selection.demoted {
                let _ = writeln!(s, "- demoted {}: {}", d.card, d.reason);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "| Study | Card | Trials | Completed | Pruned | Failed | Best val loss |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for st in &sec.studies {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                st.round,
                st.card,
                st.n_trials,
                st.completed,
                st.pruned,
                st.failed,
                st.best_value.map_or("n/a".to_string(), fmt_loss)
            );
        }
        let _ = writeln!(s, "\n| Round | Card | Epochs | Stop | Best score | Val R2 |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for t in &sec.trainings {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:?} | {} | {} |",
                t.round,
                t.card,
                t.epochs,
                t.stopped_reason,
                t.best_score.map_or("n/a".to_string(), fmt_loss),
                t.val_metrics.map_or("n/a".to_string(), |m| fmt_metric(m.r2))
            );
        }
        let d = &sec.deployed;
        let _ = writeln!(
            s,
            "\nDeployed `{}` ({}, round {}, val R2 {}{}) with {}.",
            d.checkpoint_ref,
            d.card,
            d.round,
            fmt_metric(d.val_quality),
            if d.via_fallback { ", global-best fallback" } else { "" },
            fmt_hp(&d.hp)
        );
    }
    if !report.error_traces.is_empty() {
        let _ = writeln!(s, "\n## Errors\n");
        for e in &report.error_traces {
            let _ = writeln!(s, "- {}", e.message);
        }
    }
    let _ = writeln!(s, "\n## Environment\n");
    let env = &report.environment;
    let _ = writeln!(s, "- seed: {}", env.seed);
    let _ = writeln!(s, "- reasoner: {}", env.reasoner_backend);
    for (k, v) in &env.versions {
        let _ = writeln!(s, "- {k}: {v}");
    }
    if let Some(f) = &env.fault_injection {
        let _ = writeln!(s, "- injected fault: {f}");
    }
    for (k, v) in &env.config_sources {
        let _ = writeln!(s, "- {k} from {v}");
    }
    let _ = writeln!(s, "- audit events: {}", report.audit_digest.n_events);
    let _ = writeln!(s, "\n{}", report.prompts.note);
    s
}

/// The three plotted fields of one sample and timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Panels {
    pub nx: usize,
    pub ny: usize,
    pub prediction: Vec<f64>,
    pub truth: Vec<f64>,
    pub error: Vec<f64>,
}

impl Panels {
    pub fn new(nx: usize, ny: usize, prediction: Vec<f64>, truth: Vec<f64>) -> Result<Self> {
        if prediction.len() != nx * ny || truth.len() != nx * ny {
            return Err(CoreError::Parameter(format!(
                "panels need {} values, got {} and {}",
                nx * ny,
                prediction.len(),
                truth.len()
            )));
        }
        let error = prediction.iter().zip(&truth).map(|(p, t)| (p - t).abs()).collect();
        Ok(Self {
            nx,
            ny,
            prediction,
            truth,
            error,
        })
    }

    /// Shared colour range of the prediction and truth panels.
    pub fn shared_range(&self) -> (f64, f64) {
        range(self.prediction.iter().chain(&self.truth))
    }

    pub fn error_range(&self) -> (f64, f64) {
        (0.0, range(self.error.iter()).1.max(0.0))
    }
}

fn range<'a>(it: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    it.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn colour(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo && v.is_finite() { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8;
    }
    out
}

/// 3x5 glyphs, one row per string, `#` set.
fn glyph(c: char) -> [&'static str; 5] {
    match c.to_ascii_uppercase() {
        'A' => ["###", "#.#", "###", "#.#", "#.#"],
        'B' => ["##.", "#.#", "##.", "#.#", "##."],
        'C' => ["###", "#..", "#..", "#..", "###"],
        'D' => ["##.", "#.#", "#.#", "#.#", "##."],
        'E' => ["###", "#..", "##.", "#..", "###"],
        'F' => ["###", "#..", "##.", "#..", "#.."],
        'G' => ["###", "#..", "#.#", "#.#", "###"],
        'H' => ["#.#", "#.#", "###", "#.#", "#.#"],
        'I' => ["###", ".#.", ".#.", ".#.", "###"],
        'J' => ["..#", "..#", "..#", "#.#", "###"],
        'K' => ["#.#", "#.#", "##.", "#.#", "#.#"],
        'L' => ["#..", "#..", "#..", "#..", "###"],
        'M' => ["#.#", "###", "###", "#.#", "#.#"],
        'N' => ["##.", "#.#", "#.#", "#.#", "#.#"],
        'O' => ["###", "#.#", "#.#", "#.#", "###"],
        'P' => ["###", "#.#", "###", "#..", "#.."],
        'Q' => ["###", "#.#", "#.#", "###", "..#"],
        'R' => ["##.", "#.#", "##.", "#.#", "#.#"],
        'S' => ["###", "#..", "###", "..#", "###"],
        'T' => ["###", ".#.", ".#.", ".#.", ".#."],
        'U' => ["#.#", "#.#", "#.#", "#.#", "###"],
        'V' => ["#.#", "#.#", "#.#", "#.#", ".#."],
        'W' => ["#.#", "#.#", "###", "###", "#.#"],
        'X' => ["#.#", "#.#", ".#.", "#.#", "#.#"],
        'Y' => ["#.#", "#.#", ".#.", ".#.", ".#."],
        'Z' => ["###", "..#", ".#.", "#..", "###"],
        '0' => ["###", "#.#", "#.#", "#.#", "###"],
        '1' => [".#.", "##.", ".#.", ".#.", "###"],
        '2' => ["###", "..#", "###", "#..", "###"],
        '3' => ["###", "..#", "###", "..#", "###"],
        '4' => ["#.#", "#.#", "###", "..#", "..#"],
        '5' => ["###", "#..", "###", "..#", "###"],
        '6' => ["###", "#..", "###", "#.#", "###"],
        '7' => ["###", "..#", "..#", "..#", "..#"],
        '8' => ["###", "#.#", "###", "#.#", "###"],
        '9' => ["###", "#.#", "###", "..#", "###"],
        '.' => ["...", "...", "...", "...", ".#."],
        '-' => ["...", "...", "###", "...", "..."],
        '+' => ["...", ".#.", "###", ".#.", "..."],
        '[' => ["##.", "#..", "#..", "#..", "##."],
        ']' => [".##", "..#", "..#", "..#", ".##"],
        '|' => [".#.", ".#.", ".#.", ".#.", ".#."],
        ':' => ["...", ".#.", "...", ".#.", "..."],
        '=' => ["...", "###", "...", "###", "..."],
        _ => ["...", "...", "...", "...", "..."],
    }
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            rgb: vec![255; w * h * 3],
        }
    }

    fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.w && y < self.h {
            let i = (y * self.w + x) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn text(&mut self, x: usize, y: usize, s: &str, scale: usize) {
        for (k, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (r, row) in g.iter().enumerate() {
                for (c, b) in row.bytes().enumerate() {
                    if b == b'#' {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                self.set(x + (k * 4 + c) * scale + dx, y + r * scale + dy, [0, 0, 0]);
                            }
                        }
                    }
                }
            }
        }
    }

    fn field(&mut self, x0: usize, y0: usize, cell: usize, p: &Panels, v: &[f64], lo: f64, hi: f64) {
        for i in 0..p.nx {
            for j in 0..p.ny {
                let c = colour(v[i * p.ny + j], lo, hi);
                for dy in 0..cell {
                    for dx in 0..cell {
                        self.set(x0 + j * cell + dx, y0 + i * cell + dy, c);
                    }
                }
            }
        }
    }

    fn colourbar(&mut self, x0: usize, y0: usize, w: usize, h: usize) {
        for dx in 0..w {
            let c = colour(dx as f64, 0.0, (w - 1).max(1) as f64);
            for dy in 0..h {
                self.set(x0 + dx, y0 + dy, c);
            }
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders the panels side by side into an RGB raster.
pub fn render_panels(p: &Panels, unit_label: &str) -> (usize, usize, Vec<u8>) {
    let cell = (160 / p.nx.max(p.ny)).max(1);
    let pw = p.ny * cell;
    let ph = p.nx * cell;
    let margin = 12;
    let title_h = 14;
    let bar_h = 8;
    let w = margin + 3 * (pw + margin);
    let h = margin + title_h + ph + 4 + bar_h + 4 + 12 + margin;
    let mut cv = Canvas::new(w, h);
    let (lo, hi) = p.shared_range();
    let (elo, ehi) = p.error_range();
    let titles = ["PREDICTION", "TRUTH", "|ERROR|"];
    for k in 0..3 {
        let x0 = margin + k * (pw + margin);
        cv.text(x0, margin, titles[k], 2);
        let (v, a, b) = match k {
            0 => (&p.prediction, lo, hi),
            1 => (&p.truth, lo, hi),
            _ => (&p.error, elo, ehi),
        };
        let y0 = margin + title_h;
        cv.field(x0, y0, cell, p, v, a, b);
        let yb = y0 + ph + 4;
        cv.colourbar(x0, yb, pw, bar_h);
        let label = format!("{} {}", fmt_tick(a), fmt_tick(b));
        cv.text(x0, yb + bar_h + 4, &label, 1);
        if k < 2 {
            cv.text(x0 + pw.saturating_sub(unit_label.len() * 4), yb + bar_h + 4 + 6, unit_label, 1);
        }
    }
    (w, h, cv.rgb)
}

pub fn write_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| CoreError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(rgb).map_err(io)?;
    writer.finish().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub image: PathBuf,
    pub qoi: Qoi,
    pub sample: usize,
    pub dataset_index: usize,
    pub timestep: usize,
    pub unit: String,
    pub shared_range: (f64, f64),
    pub error_range: (f64, f64),
    pub min_error: f64,
}

/// Plots the deployed surrogate on test sample `sample` at `timestep`
/// (negative counts from the end). 3-D grids show the middle layer.
pub fn plot_fields(run_dir: &Path, qoi: Qoi, sample: usize, timestep: i64) -> Result<PlotSummary> {
    let ctx = SharedContext::load(run_dir)?;
    let dep = ctx
        .deployed
        .get(&qoi)
        .ok_or_else(|| CoreError::Parameter(format!("run has no deployed {qoi} surrogate")))?;
    let data_dir = ctx
        .data_dir
        .as_ref()
        .ok_or_else(|| CoreError::Parameter("run does not record its dataset".into()))?;
    let pre = ctx
        .preprocessing
        .ok_or_else(|| CoreError::Parameter("run has no preprocessing configuration".into()))?;
    let bundle = read_dataset(Path::new(data_dir))?;
    let data = prepare_data(&bundle, qoi, &pre)?;
    let &index = data.test.get(sample).ok_or_else(|| {
        CoreError::Parameter(format!("sample {sample} out of range (test split has {})", data.test.len()))
    })?;
    let t_len = data.timesteps as i64;
    let t = if timestep < 0 { t_len + timestep } else { timestep };
    if !(0..t_len).contains(&t) {
        return Err(CoreError::Parameter(format!("timestep {timestep} out of range for {t_len} steps")));
    }
    let t = t as usize;
    let bin = run_dir.join(&dep.checkpoint_ref);
    let manifest = bin.with_extension("json");
    let loaded = ParamStore::load(&bin, &manifest)?;
    let mut model = Model::build(&dep.spec, 0)?;
    model.params.load_from(&loaded)?;
    let pred = predict_physical(&model, &model.params, &data, &[index]);
    let truth = data.truth_physical(&[index]);
    let [nx, ny, nz] = data.dims;
    let z = nz / 2;
    let cells = data.cells();
    let slice = |v: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                out.push(v[t * cells + (i * ny + j) * nz + z]);
            }
        }
        out
    };
    let panels = Panels::new(nx, ny, slice(&pred), slice(&truth))?;
    let unit = match qoi {
        Qoi::Pressure => "P [bar]",
        Qoi::Saturation => "S [-]",
    };
    let (w, h, rgb) = render_panels(&panels, unit);
    let name = format!("{qoi}-sample{sample}-t{t}");
    let image = run_dir.join("plots").join(format!("{name}.png"));
    write_png(&image, w, h, &rgb)?;
    let summary = PlotSummary {
        image: PathBuf::from("plots").join(format!("{name}.png")),
        qoi,
        sample,
        dataset_index: index,
        timestep: t,
        unit: unit.into(),
        shared_range: panels.shared_range(),
        error_range: panels.error_range(),
        min_error: panels.error.iter().copied().fold(f64::INFINITY, f64::min),
    };
    write_file(
        &run_dir.join("plots").join(format!("{name}.json")),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}
