//! Architecture commitment, failure diagnosis, recovery policy and global-best
//! tracking.

use serde::{Deserialize, Serialize};

use crate::context::{TargetMode, TargetSpec};
use crate::hpo::{Assignment, StudyRecord, TrialState};
use crate::training::{InstabilityKind, TrainResult};
use crate::zoo::{Family, MemoryEstimate, ModelSpec};
use crate::{CoreError, Qoi, Result};

pub const PLATEAU_TOL: f64 = 1e-4;
pub const RESTART_LR_CAP: f64 = 5e-4;
pub const RESTART_GRAD_CLIP: f64 = 0.25;
/// Consecutive unstable rounds on one card before switching instead of restarting.
pub const UNSTABLE_BEFORE_SWITCH: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demotion {
    pub card: Family,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSelection {
    pub qoi: Qoi,
    pub card: Family,
    pub rationale: String,
    pub feasibility: MemoryEstimate,
    pub alternatives_ranked: Vec<Family>,
    #[serde(default)]
    pub demoted: Vec<Demotion>,
}

/// Commits the first card of `ranking` whose probe is feasible. Infeasible
/// cards are recorded as demoted and excluded from the alternatives.
pub fn select_architecture(
    qoi: Qoi,
    ranking: &[Family],
    rationale: &str,
    mut probe: impl FnMut(Family) -> MemoryEstimate,
) -> Result<ArchitectureSelection> {
    if ranking.is_empty() {
        return Err(CoreError::Config("empty architecture ranking".into()));
    }
    let mut demoted = Vec::new();
    for (i, &card) in ranking.iter().enumerate() {
        let est = probe(card);
        if est.feasible {
            let mut alternatives: Vec<Family> = ranking[i + 1..].to_vec();
            alternatives.retain(|c| *c != card);
            return Ok(ArchitectureSelection {
                qoi,
                card,
                rationale: rationale.into(),
                feasibility: est,
                alternatives_ranked: alternatives,
                demoted,
            });
        }
        demoted.push(Demotion {
            card,
            reason: est.reason.clone().unwrap_or_else(|| "infeasible".into()),
        });
    }
    let listing: Vec<String> = demoted.iter().map(|d| format!("{}: {}", d.card, d.reason)).collect();
    Err(CoreError::Config(format!(
        "no architecture fits the memory budget for {qoi}: {}",
        listing.join("; ")
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisState {
    Converging,
    Unstable,
    Underperforming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finding {
    NonFiniteLoss,
    GradExplosion,
    GradVanish,
    ZeroCompletedTrials,
    Plateau,
    BelowTarget,
}

impl Finding {
    pub fn is_hard_failure(self) -> bool {
        matches!(
            self,
            Finding::NonFiniteLoss | Finding::GradExplosion | Finding::GradVanish | Finding::ZeroCompletedTrials
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub state: DiagnosisState,
    pub evidence: Vec<Finding>,
    pub quality: Option<f64>,
    /// Quality gain over the previous evaluation of the same round, if any.
    pub improvement: Option<f64>,
}

/// Inputs for [`diagnose`].
#[derive(Clone, Copy, Debug)]
pub struct DiagnoseInput<'a> {
    pub result: Option<&'a TrainResult>,
    pub study: Option<&'a StudyRecord>,
    pub quality: Option<f64>,
    /// Quality before the continuation of this round, when one ran.
    pub previous_quality: Option<f64>,
    pub continuation_used: bool,
    pub target: TargetSpec,
}

pub fn meets_quality(r2: f64, target: &TargetSpec) -> bool {
    match (target.mode, target.threshold) {
        (TargetMode::Threshold, Some(t)) => r2 > t,
        _ => false,
    }
}

pub fn diagnose(input: &DiagnoseInput) -> Diagnosis {
    let mut evidence = Vec::new();
    let push = |f: Finding, ev: &mut Vec<Finding>| {
        if !ev.contains(&f) {
            ev.push(f);
        }
    };
    if let Some(study) = input.study {
        if study.count(TrialState::Completed) == 0 {
            push(Finding::ZeroCompletedTrials, &mut evidence);
        }
    }
    if let Some(result) = input.result {
        for ev in &result.instability {
            let f = match ev.kind {
                InstabilityKind::NonFiniteLoss => Finding::NonFiniteLoss,
                InstabilityKind::NonFiniteGradient | InstabilityKind::GradientExplosion => Finding::GradExplosion,
                InstabilityKind::VanishingGradient => Finding::GradVanish,
            };
            push(f, &mut evidence);
        }
        if result.instability.is_empty()
            && result
                .history
                .iter()
                .any(|r| !r.train_loss.is_finite() || !r.val_loss.is_finite())
        {
            push(Finding::NonFiniteLoss, &mut evidence);
        }
    }
    if input.quality.is_some_and(|q| !q.is_finite()) {
        push(Finding::NonFiniteLoss, &mut evidence);
    }
    if input.quality.is_none() && input.result.is_none() && evidence.is_empty() {
        push(Finding::ZeroCompletedTrials, &mut evidence);
    }
    let improvement = match (input.quality, input.previous_quality) {
        (Some(q), Some(p)) => Some(q - p),
        _ => None,
    };
    if evidence.iter().any(|f| f.is_hard_failure()) {
        return Diagnosis {
            state: DiagnosisState::Unstable,
            evidence,
            quality: input.quality,
            improvement,
        };
    }
    let met = input.quality.is_some_and(|q| meets_quality(q, &input.target));
    if !met && input.target.mode == TargetMode::Threshold {
        push(Finding::BelowTarget, &mut evidence);
    }
    let improving = improvement.is_some_and(|d| d > PLATEAU_TOL);
    if input.continuation_used && !improving {
        push(Finding::Plateau, &mut evidence);
    }
    let state = if met || !input.continuation_used || improving {
        DiagnosisState::Converging
    } else {
        DiagnosisState::Underperforming
    };
    Diagnosis {
        state,
        evidence,
        quality: input.quality,
        improvement,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBudgets {
    pub max_rounds_per_qoi: u32,
    pub e_extra: u32,
    pub max_arch_switches: u32,
}

impl Default for ControlBudgets {
    fn default() -> Self {
        Self {
            max_rounds_per_qoi: 10,
            e_extra: 10,
            max_arch_switches: 7,
        }
    }
}

impl ControlBudgets {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds_per_qoi == 0 || self.e_extra == 0 || self.max_arch_switches == 0 {
            return Err(CoreError::Parameter("control budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecoveryAction {
    Continuation { epochs: u32 },
    StabilityRestart { lr_cap: f64, grad_clip: f64 },
    ArchitectureSwitch { from: Family, to: Family },
    GlobalBestFallback { reason: String },
}

impl RecoveryAction {
    pub fn name(&self) -> &'static str {
        match self {
            RecoveryAction::Continuation { .. } => "continuation",
            RecoveryAction::StabilityRestart { .. } => "stability_restart",
            RecoveryAction::ArchitectureSwitch { .. } => "architecture_switch",
            RecoveryAction::GlobalBestFallback { .. } => "global_best_fallback",
        }
    }
}

/// Controller state consulted by [`self_correct`].
#[derive(Clone, Debug)]
pub struct CorrectionState<'a> {
    pub diagnosis: &'a Diagnosis,
    pub card: Family,
    pub budgets: ControlBudgets,
    pub rounds_used: u32,
    pub switches_used: u32,
    pub continuation_used: bool,
    /// Unstable rounds in a row on the current card, including this one.
    pub consecutive_unstable: u32,
    /// Remaining candidates in preference order.
    pub alternatives: &'a [Family],
    /// Cards already committed for this QoI.
    pub tried: &'a [Family],
    /// Tightening applied to the current card's space, if any.
    pub tightening: Option<(f64, f64)>,
    /// Lower end of the learning-rate domain.
    pub lr_floor: f64,
}

/// Next tightening: the fixed defaults first, then both values halved with
/// the learning rate floored at the domain's lower end.
pub fn next_tightening(current: Option<(f64, f64)>, lr_floor: f64) -> (f64, f64) {
    match current {
        None => (RESTART_LR_CAP.max(lr_floor), RESTART_GRAD_CLIP),
        Some((lr, clip)) => ((lr / 2.0).max(lr_floor), clip / 2.0),
    }
}

fn switch_or_fallback(s: &CorrectionState, why: &str) -> RecoveryAction {
    if s.switches_used < s.budgets.max_arch_switches {
        if let Some(&to) = s.alternatives.iter().find(|c| !s.tried.contains(c) && **c != s.card) {
            return RecoveryAction::ArchitectureSwitch { from: s.card, to };
        }
    }
    RecoveryAction::GlobalBestFallback {
        reason: format!("{why}; no architecture switch available"),
    }
}

/// Maps a diagnosis and the remaining budgets to exactly one action.
pub fn self_correct(s: &CorrectionState) -> RecoveryAction {
    if s.rounds_used >= s.budgets.max_rounds_per_qoi {
        return RecoveryAction::GlobalBestFallback {
            reason: format!("round budget of {} exhausted", s.budgets.max_rounds_per_qoi),
        };
    }
    match s.diagnosis.state {
        DiagnosisState::Converging if !s.continuation_used => RecoveryAction::Continuation {
            epochs: s.budgets.e_extra,
        },
        DiagnosisState::Converging => switch_or_fallback(s, "continuation already used this round"),
        DiagnosisState::Unstable if s.consecutive_unstable >= UNSTABLE_BEFORE_SWITCH => {
            switch_or_fallback(s, "repeated instability on this architecture")
        }
        DiagnosisState::Unstable => {
            let (lr_cap, grad_clip) = next_tightening(s.tightening, s.lr_floor);
            RecoveryAction::StabilityRestart { lr_cap, grad_clip }
        }
        DiagnosisState::Underperforming => switch_or_fallback(s, "performance plateaued"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalBestEntry {
    pub checkpoint_ref: String,
    pub quality: f64,
    pub round: u32,
    pub card: Family,
}

/// Replaces the entry only on strictly greater, finite quality.
pub fn update_global_best(current: &mut Option<GlobalBestEntry>, candidate: GlobalBestEntry) -> bool {
    if !candidate.quality.is_finite() {
        return false;
    }
    let better = current.as_ref().is_none_or(|c| candidate.quality > c.quality);
    if better {
        *current = Some(candidate);
    }
    better
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Initial,
    Continuation,
    Restart,
    Switch,
    Retrain,
    Fallback,
}

/// One row of the per-QoI recovery timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub round: u32,
    pub round_label: String,
    pub kind: RowKind,
    pub strategy: String,
    pub card: Family,
    pub r2: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub qoi: Qoi,
    pub checkpoint_ref: String,
    pub card: Family,
    pub round: u32,
    pub val_quality: f64,
    pub hp: Assignment,
    pub spec: ModelSpec,
    pub via_fallback: bool,
}
