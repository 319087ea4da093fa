use plume_core::context::TargetSpec;
use plume_core::control::*;
use plume_core::hpo::{HpoBudget, SamplerKind, SearchSpace, StudyRecord};
use plume_core::zoo::{scripted_ranking, Family, MemoryEstimate};
use plume_core::{CoreError, Qoi};
use proptest::prelude::*;

fn est(feasible: bool, bytes: usize) -> MemoryEstimate {
    MemoryEstimate {
        param_count: 1,
        peak_activation_bytes: bytes,
        estimated_bytes: bytes,
        budget_bytes: 100,
        feasible,
        reason: (!feasible).then(|| format!("estimated {bytes} bytes exceeds budget 100")),
    }
}

#[test]
fn selection_demotes_infeasible_top_card() {
    let ranking = [Family::ResUNet, Family::UNet, Family::FNO];
    let sel = select_architecture(Qoi::Saturation, &ranking, "r", |f| est(f != Family::ResUNet, 50)).unwrap();
    assert_eq!(sel.card, Family::UNet);
    assert_eq!(sel.demoted.len(), 1);
    assert_eq!(sel.demoted[0].card, Family::ResUNet);
    assert_eq!(sel.alternatives_ranked, vec![Family::FNO]);
}

#[test]
fn selection_fails_listing_every_estimate() {
    let ranking = Family::ALL;
    match select_architecture(Qoi::Pressure, &ranking, "r", |_| est(false, 500)) {
        Err(CoreError::Config(msg)) => {
            for f in Family::ALL {
                assert!(msg.contains(f.as_str()), "{msg}");
            }
            assert_eq!(msg.matches("exceeds budget").count(), 8);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn scripted_priors() {
    let sparse = scripted_ranking(0.995);
    assert_eq!(&sparse[..2], &[Family::ResUNet, Family::UNet]);
    assert!(sparse[0].supports_aux_bce() && sparse[1].supports_aux_bce());
    let dense = scripted_ranking(0.0);
    let pos = |f| dense.iter().position(|x| *x == f).unwrap();
    assert!(pos(Family::ResUNet) < pos(Family::UNet));
}

fn threshold() -> TargetSpec {
    TargetSpec::threshold(0.95).unwrap()
}

fn input(quality: Option<f64>, previous: Option<f64>, continuation: bool) -> DiagnoseInput<'static> {
    DiagnoseInput {
        result: None,
        study: None,
        quality,
        previous_quality: previous,
        continuation_used: continuation,
        target: threshold(),
    }
}

#[test]
fn diagnosis_cases() {
    let d = diagnose(&input(Some(0.9479), None, false));
    assert_eq!(d.state, DiagnosisState::Converging);
    assert!(d.evidence.contains(&Finding::BelowTarget));

    let d = diagnose(&input(Some(0.9479), Some(0.9479), true));
    assert_eq!(d.state, DiagnosisState::Underperforming);
    assert!(d.evidence.contains(&Finding::Plateau));

    let d = diagnose(&input(Some(f64::NAN), None, false));
    assert_eq!(d.state, DiagnosisState::Unstable);

    let empty = StudyRecord::new("x", SearchSpace::new(vec![]), HpoBudget::default(), 0, SamplerKind::Tpe);
    let d = diagnose(&DiagnoseInput {
        study: Some(&empty),
        ..input(Some(0.99), None, false)
    });
    assert_eq!(d.state, DiagnosisState::Unstable);
    assert!(d.evidence.contains(&Finding::ZeroCompletedTrials));
}

#[test]
fn threshold_is_strict() {
    assert!(meets_quality(0.9532, &threshold()));
    assert!(!meets_quality(0.9479, &threshold()));
    assert!(!meets_quality(0.95, &threshold()));
    assert!(!meets_quality(0.9999, &TargetSpec::maximize()));
}

#[test]
fn global_best_cases() {
    let e = |q: f64| GlobalBestEntry {
        checkpoint_ref: format!("c{q}"),
        quality: q,
        round: 1,
        card: Family::UNet,
    };
    let mut gb = None;
    assert!(update_global_best(&mut gb, e(0.90)));
    let mut gb = Some(e(0.9972));
    assert!(!update_global_best(&mut gb, e(0.95)));
    assert_eq!(gb.as_ref().unwrap().quality, 0.9972);
    let mut gb = Some(e(0.9479));
    assert!(update_global_best(&mut gb, e(0.9532)));
    assert!(!update_global_best(&mut gb, e(f64::NAN)));
    assert!(!update_global_best(&mut gb, e(0.9532)));
}

proptest! {
    #[test]
    fn global_best_is_monotone(qs in prop::collection::vec(prop_oneof![-1.0f64..1.0, Just(f64::NAN)], 1..30)) {
        let mut gb: Option<GlobalBestEntry> = None;
        let mut prev = f64::NEG_INFINITY;
        for (i, q) in qs.iter().enumerate() {
            update_global_best(&mut gb, GlobalBestEntry {
                checkpoint_ref: i.to_string(),
                quality: *q,
                round: i as u32,
                card: Family::FNO,
            });
            if let Some(g) = &gb {
                prop_assert!(g.quality >= prev);
                prev = g.quality;
            }
        }
        let best = qs.iter().copied().filter(|q| q.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if best.is_finite() {
            prop_assert_eq!(gb.unwrap().quality, best);
        }
    }
}

#[test]
fn self_correct_is_total_and_follows_the_policy() {
    let budgets = ControlBudgets {
        max_rounds_per_qoi: 4,
        e_extra: 10,
        max_arch_switches: 2,
    };
    let states = [
        DiagnosisState::Converging,
        DiagnosisState::Unstable,
        DiagnosisState::Underperforming,
    ];
    let alts_options: [&[Family]; 3] = [&[], &[Family::UNet], &[Family::ResUNet, Family::FNO]];
    let mut n = 0;
    for state in states {
        for rounds_used in 0..=5 {
            for switches_used in 0..=3 {
                for continuation_used in [false, true] {
                    for consecutive_unstable in 0..=3 {
                        for alts in alts_options {
                            for tightening in [None, Some((5e-4, 0.25))] {
                                let diagnosis = Diagnosis {
                                    state,
                                    evidence: vec![],
                                    quality: Some(0.5),
                                    improvement: None,
                                };
                                let tried = [Family::ResUNet];
                                let s = CorrectionState {
                                    diagnosis: &diagnosis,
                                    card: Family::ResUNet,
                                    budgets,
                                    rounds_used,
                                    switches_used,
                                    continuation_used,
                                    consecutive_unstable,
                                    alternatives: alts,
                                    tried: &tried,
                                    tightening,
                                    lr_floor: 1e-5,
                                };
                                let action = self_correct(&s);
                                n += 1;
                                let untried = alts.iter().find(|c| !tried.contains(c)).copied();
                                let can_switch = switches_used < budgets.max_arch_switches && untried.is_some();
                                let expect_switch = || {
                                    if can_switch {
                                        assert_eq!(
                                            action,
                                            RecoveryAction::ArchitectureSwitch {
                                                from: Family::ResUNet,
                                                to: untried.unwrap()
                                            }
                                        );
                                    } else {
                                        assert_eq!(action.name(), "global_best_fallback");
                                    }
                                };
                                if rounds_used >= budgets.max_rounds_per_qoi {
                                    assert_eq!(action.name(), "global_best_fallback");
                                    continue;
                                }
                                match state {
                                    DiagnosisState::Converging if !continuation_used => {
                                        assert_eq!(action, RecoveryAction::Continuation { epochs: 10 })
                                    }
                                    DiagnosisState::Unstable if consecutive_unstable < UNSTABLE_BEFORE_SWITCH => {
                                        let want = if tightening.is_none() { (5e-4, 0.25) } else { (2.5e-4, 0.125) };
                                        assert_eq!(
                                            action,
                                            RecoveryAction::StabilityRestart {
                                                lr_cap: want.0,
                                                grad_clip: want.1
                                            }
                                        );
                                    }
                                    _ => expect_switch(),
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert_eq!(n, 3 * 6 * 4 * 2 * 4 * 3 * 2);
}

#[test]
fn single_round_budget_falls_back_immediately() {
    let diagnosis = diagnose(&input(Some(0.5), None, false));
    let s = CorrectionState {
        diagnosis: &diagnosis,
        card: Family::UNet,
        budgets: ControlBudgets {
            max_rounds_per_qoi: 1,
            ..ControlBudgets::default()
        },
        rounds_used: 1,
        switches_used: 0,
        continuation_used: false,
        consecutive_unstable: 0,
        alternatives: &[Family::FNO],
        tried: &[Family::UNet],
        tightening: None,
        lr_floor: 1e-5,
    };
    assert_eq!(self_correct(&s).name(), "global_best_fallback");
}

#[test]
fn tightening_schedule_floors_at_domain() {
    assert_eq!(next_tightening(None, 1e-5), (5e-4, 0.25));
    assert_eq!(next_tightening(Some((5e-4, 0.25)), 1e-5), (2.5e-4, 0.125));
    assert_eq!(next_tightening(Some((1.5e-5, 0.25)), 1e-5), (1e-5, 0.125));
}
