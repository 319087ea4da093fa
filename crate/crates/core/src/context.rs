//! The shared blackboard every agent reads from and writes to, plus the
//! append-only audit log and task targets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{ArchitectureSelection, Deployment, GlobalBestEntry, TimelineRow};
use crate::datagen::Manifest;
use crate::error::{write_file, CoreError, Result};
use crate::hpo::StudyRecord;
use crate::profiling::{DataProfile, PreprocessingConfig};
use crate::training::{Metrics, TrainResult};

/// Quantity of interest predicted by a surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qoi {
    Pressure,
    Saturation,
}

impl Qoi {
    pub const ALL: [Qoi; 2] = [Qoi::Pressure, Qoi::Saturation];

    pub fn as_str(self) -> &'static str {
        match self {
            Qoi::Pressure => "pressure",
            Qoi::Saturation => "saturation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pressure" | "p" => Some(Qoi::Pressure),
            "saturation" | "s" | "sat" => Some(Qoi::Saturation),
            _ => None,
        }
    }
}

impl fmt::Display for Qoi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DataAnalysis,
    ModelSelection,
    Hpo,
    Training,
    SelfCorrection,
    Reporting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub stage: Stage,
    pub actor: String,
    pub action: String,
    pub rationale: String,
    /// Key into the shared context, e.g. `studies.saturation[0]`.
    pub payload_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qoi: Option<Qoi>,
    /// Structured arguments of the action (tool arguments, recovery parameters).
    #[serde(default)]
    pub detail: serde_json::Value,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Threshold,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMetric {
    R2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub mode: TargetMode,
    pub metric: TargetMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

pub const DEFAULT_R2_THRESHOLD: f64 = 0.95;

impl TargetSpec {
    pub fn threshold(t: f64) -> Result<Self> {
        if !(t <= 1.0) {
            return Err(CoreError::Parameter(format!(
                "R2 threshold {t} exceeds 1"
            )));
        }
        Ok(Self {
            mode: TargetMode::Threshold,
            metric: TargetMetric::R2,
            threshold: Some(t),
        })
    }

    pub fn maximize() -> Self {
        Self {
            mode: TargetMode::Maximize,
            metric: TargetMetric::R2,
            threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.threshold) {
            (TargetMode::Threshold, Some(t)) if t <= 1.0 => Ok(()),
            (TargetMode::Threshold, Some(t)) => Err(CoreError::Parameter(format!(
                "R2 threshold {t} exceeds 1"
            ))),
            (TargetMode::Threshold, None) => Err(CoreError::Parameter(
                "threshold mode needs a threshold".into(),
            )),
            (TargetMode::Maximize, None) => Ok(()),
            (TargetMode::Maximize, Some(_)) => Err(CoreError::Parameter(
                "maximize mode takes no threshold".into(),
            )),
        }
    }
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self::threshold(DEFAULT_R2_THRESHOLD).expect("default threshold is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTargets {
    pub per_qoi: BTreeMap<Qoi, TargetSpec>,
}

impl Default for TaskTargets {
    fn default() -> Self {
        Self {
            per_qoi: Qoi::ALL.iter().map(|&q| (q, TargetSpec::default())).collect(),
        }
    }
}

impl TaskTargets {
    pub fn get(&self, qoi: Qoi) -> TargetSpec {
        self.per_qoi.get(&qoi).copied().unwrap_or_default()
    }
}

/// Parsed targets win; otherwise the instruction is parsed with the scripted
/// grammar, which itself falls back to the defaults.
pub fn resolve_targets(instruction: Option<&str>, parsed: Option<TaskTargets>) -> TaskTargets {
    if let Some(p) = parsed {
        return p;
    }
    match instruction {
        Some(text) => crate::agents::parse_instruction(text).targets,
        None => TaskTargets::default(),
    }
}

/// Descriptive environment information folded into the report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub seed: u64,
    pub reasoner_backend: String,
    pub versions: BTreeMap<String, String>,
    /// Where each effective setting came from (flag, config, env, default).
    pub config_sources: BTreeMap<String, String>,
    pub fault_injection: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub qoi: Option<Qoi>,
    pub round: Option<u32>,
    pub message: String,
}

/// The blackboard. Later stages refer to earlier entries by key only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SharedContext {
    pub run_id: String,
    /// Dataset location, kept for re-plotting; not part of the report.
    #[serde(default)]
    pub data_dir: Option<String>,
    pub instruction: Option<String>,
    pub dataset: Option<Manifest>,
    pub data_profile: Option<DataProfile>,
    pub preprocessing: Option<PreprocessingConfig>,
    pub selections: BTreeMap<Qoi, ArchitectureSelection>,
    pub studies: BTreeMap<Qoi, Vec<StudyRecord>>,
    pub train_results: BTreeMap<Qoi, Vec<TrainResult>>,
    pub global_best: BTreeMap<Qoi, GlobalBestEntry>,
    pub timeline: BTreeMap<Qoi, Vec<TimelineRow>>,
    pub deployed: BTreeMap<Qoi, Deployment>,
    pub test_metrics: BTreeMap<Qoi, Metrics>,
    pub errors: Vec<ErrorTrace>,
    pub audit: Vec<AuditEvent>,
    pub targets: TaskTargets,
    pub environment: EnvironmentInfo,
}

/// Appends one event. The event's `seq` must equal the current audit length.
pub fn append_audit(ctx: &mut SharedContext, event: AuditEvent) -> Result<()> {
    let expected = ctx.audit.len() as u64;
    if event.seq != expected {
        return Err(CoreError::AuditSequence {
            expected,
            got: event.seq,
        });
    }
    ctx.audit.push(event);
    Ok(())
}

/// Fields of an audit event other than its sequence number and time.
#[derive(Clone, Debug)]
pub struct AuditEntry {
    pub stage: Stage,
    pub actor: String,
    pub action: String,
    pub rationale: String,
    pub payload_ref: String,
    pub qoi: Option<Qoi>,
    pub detail: serde_json::Value,
}

impl AuditEntry {
    pub fn new(stage: Stage, actor: &str, action: &str) -> Self {
        Self {
            stage,
            actor: actor.into(),
            action: action.into(),
            rationale: String::new(),
            payload_ref: String::new(),
            qoi: None,
            detail: serde_json::Value::Null,
        }
    }

    pub fn rationale(mut self, r: impl Into<String>) -> Self {
        self.rationale = r.into();
        self
    }

    pub fn payload(mut self, p: impl Into<String>) -> Self {
        self.payload_ref = p.into();
        self
    }

    pub fn qoi(mut self, q: Qoi) -> Self {
        self.qoi = Some(q);
        self
    }

    pub fn detail(mut self, d: serde_json::Value) -> Self {
        self.detail = d;
        self
    }
}

impl SharedContext {
    pub fn new(run_id: impl Into<String>, targets: TaskTargets) -> Self {
        Self {
            run_id: run_id.into(),
            targets,
            ..Self::default()
        }
    }

    /// Appends an event at the next sequence number.
    pub fn log(&mut self, entry: AuditEntry, wall_time: f64) -> u64 {
        let seq = self.audit.len() as u64;
        let event = AuditEvent {
            seq,
            stage: entry.stage,
            actor: entry.actor,
            action: entry.action,
            rationale: entry.rationale,
            payload_ref: entry.payload_ref,
            qoi: entry.qoi,
            detail: entry.detail,
            wall_time,
        };
        append_audit(self, event).expect("sequence is derived from the audit length");
        seq
    }

    /// Writes `context.json` and `audit.jsonl` into `run_dir`.
    pub fn persist(&self, run_dir: &Path) -> Result<()> {
        write_file(&run_dir.join("context.json"), &serde_json::to_vec_pretty(self)?)?;
        let mut lines = Vec::new();
        for e in &self.audit {
            serde_json::to_writer(&mut lines, e)?;
            lines.push(b'\n');
        }
        write_file(&run_dir.join("audit.jsonl"), &lines)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("context.json");
        let bytes = crate::error::read_file(&path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Checks the stage sequence against
/// `data_analysis+ model_selection+ (hpo+ training+ self_correction*)+ reporting+`.
pub fn stage_order_valid(stages: &[Stage]) -> bool {
    use Stage::*;
    #[derive(PartialEq, Clone, Copy)]
    enum S {
        Start,
        Data,
        Select,
        Hpo,
        Train,
        Correct,
        Report,
    }
    let mut s = S::Start;
    for &st in stages {
        s = match (s, st) {
            (S::Start | S::Data, DataAnalysis) => S::Data,
            (S::Data | S::Select, ModelSelection) => S::Select,
            (S::Select | S::Hpo | S::Train | S::Correct, Hpo) => S::Hpo,
            (S::Hpo | S::Train, Training) => S::Train,
            (S::Train | S::Correct, SelfCorrection) => S::Correct,
            (S::Train | S::Correct | S::Report, Reporting) => S::Report,
            _ => return false,
        };
    }
    s == S::Report
}

/// Removes every object key named `wall_time`, recursively.
pub fn strip_wall_time(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_time");
            for v in map.values_mut() {
                strip_wall_time(v);
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}
