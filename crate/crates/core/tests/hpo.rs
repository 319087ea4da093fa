mod common;

use plume_core::hpo::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lr_space() -> SearchSpace {
    SearchSpace::new(vec![ParamDef {
        name: LR.into(),
        domain: Domain::LogUniform { lo: 1e-5, hi: 1e-2 },
    }])
}

fn budget(n: u32) -> HpoBudget {
    HpoBudget {
        n_trials: n,
        epochs_per_trial: 3,
        train_batches: 1,
        val_batches: 1,
    }
}

#[test]
fn categorical_draws_are_balanced() {
    let space = SearchSpace::new(vec![ParamDef {
        name: "b".into(),
        domain: Domain::Categorical {
            values: vec![Value::Int(1), Value::Int(2), Value::Int(4)],
        },
    }]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 3];
    for _ in 0..3000 {
        match random_suggest(&space, &mut rng)["b"] {
            Value::Int(1) => counts[0] += 1,
            Value::Int(2) => counts[1] += 1,
            Value::Int(4) => counts[2] += 1,
            ref v => panic!("{v:?}"),
        }
    }
    for c in counts {
        let f = c as f64 / 3000.0;
        assert!((0.28..=0.39).contains(&f), "{counts:?}");
    }
}

#[test]
fn tightened_space_bounds_every_draw() {
    let cap = tighten_space(&lr_space(), 5e-4, 0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..2000 {
        assert!(random_suggest(&cap, &mut rng)[LR].as_f64().unwrap() <= 5e-4);
    }
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let mut b = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(random_suggest(&cap, &mut a), random_suggest(&cap, &mut b));
}

#[test]
fn tighten_space_cases() {
    let t = tighten_space(&lr_space(), 5e-4, 0.25).unwrap();
    assert_eq!(t.get(LR), Some(&Domain::LogUniform { lo: 1e-5, hi: 5e-4 }));
    assert_eq!(t.constraints.grad_clip, 0.25);
    assert_eq!(t.constraints.lr_upper_bound, Some(5e-4));
    assert_eq!(tighten_space(&t, 5e-4, 0.25).unwrap(), t);
    assert!(tighten_space(&lr_space(), 1e-6, 0.25).is_err());
}

proptest! {
    #[test]
    fn tightening_is_idempotent(cap in 1e-5f64..1e-2, clip in 0.01f64..2.0) {
        let once = tighten_space(&lr_space(), cap, clip).unwrap();
        prop_assert_eq!(tighten_space(&once, cap, clip).unwrap(), once);
    }

    #[test]
    fn suggestions_stay_in_domain(seed in 0u64..1000) {
        let space = common::synthetic_space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut study = StudyRecord::new("p", space.clone(), budget(10), seed, SamplerKind::Tpe);
        for i in 0..8 {
            let a = tpe_suggest(&study, &space, &TpeConfig::default(), &mut rng);
            prop_assert!(space.contains(&a));
            study.trials.push(TrialRecord {
                trial_id: i,
                params: a.clone(),
                intermediate: vec![(1, 1.0)],
                state: TrialState::Completed,
                final_value: Some(common::synthetic_objective(&a)),
                failure: None,
            });
        }
    }
}

fn observed(space: &SearchSpace, n: usize, seed: u64, f: impl Fn(&Assignment) -> f64) -> StudyRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut study = StudyRecord::new("q", space.clone(), budget(n as u32), seed, SamplerKind::Tpe);
    for i in 0..n {
        let a = random_suggest(space, &mut rng);
        let v = f(&a);
        study.trials.push(TrialRecord {
            trial_id: i as u32,
            params: a,
            intermediate: vec![(1, v)],
            state: TrialState::Completed,
            final_value: Some(v),
            failure: None,
        });
    }
    study
}

#[test]
fn tpe_is_random_during_startup() {
    let space = lr_space();
    let study = observed(&space, 2, 4, |_| 1.0);
    for seed in 0..20 {
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(
            tpe_suggest(&study, &space, &TpeConfig::default(), &mut a),
            random_suggest(&space, &mut b)
        );
    }
}

#[test]
fn tpe_prefers_the_good_region() {
    let space = lr_space();
    let f = |a: &Assignment| {
        let u = a[LR].as_f64().unwrap().log10() + 3.5;
        u * u
    };
    let mut hits = 0;
    for rep in 0..500u64 {
        let study = observed(&space, 20, 1000 + rep, f);
        let mut vals: Vec<f64> = study.trials.iter().map(|t| t.final_value.unwrap()).collect();
        vals.sort_by(f64::total_cmp);
        let q25 = vals[vals.len() / 4];
        let mut rng = ChaCha8Rng::seed_from_u64(rep);
        if f(&tpe_suggest(&study, &space, &TpeConfig::default(), &mut rng)) <= q25 {
            hits += 1;
        }
    }
    let p = hits as f64 / 500.0;
    assert!(p > 0.25, "top-quartile rate {p}");
}

#[test]
fn tpe_survives_constant_objective() {
    let space = common::synthetic_space();
    let study = observed(&space, 12, 5, |_| 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        assert!(space.contains(&tpe_suggest(&study, &space, &TpeConfig::default(), &mut rng)));
    }
}

#[test]
fn tpe_beats_random_search_on_synthetic_bowl() {
    let (tpe, rnd) = common::tpe_vs_random(100);
    assert!(tpe <= rnd, "tpe {tpe} random {rnd}");
}

#[test]
fn median_pruner_cases() {
    let mk = |id, v: f64| TrialRecord {
        trial_id: id,
        params: Assignment::new(),
        intermediate: vec![(1, 1.0), (2, 1.0), (3, v)],
        state: TrialState::Completed,
        final_value: Some(v),
        failure: None,
    };
    let mut study = StudyRecord::new("m", lr_space(), budget(4), 0, SamplerKind::Random);
    let cfg = PrunerConfig::default();
    assert!(!median_prune_decision(&mk(9, 0.6), &study, 3, &cfg));
    study.trials = vec![mk(0, 0.5), mk(1, 0.3), mk(2, 0.7)];
    assert!(median_prune_decision(&mk(9, 0.6), &study, 3, &cfg));
    study.trials = vec![mk(0, 0.6), mk(1, 0.6), mk(2, 0.6)];
    assert!(!median_prune_decision(&mk(9, 0.6), &study, 3, &cfg));
}

#[test]
fn median_pruner_matches_brute_force() {
    let (checked, bad) = common::pruner_enumeration();
    assert!(checked > 10_000);
    assert_eq!(bad, 0);
}

#[test]
fn study_accounting() {
    let one = run_study("u", &lr_space(), budget(1), PrunerConfig::default(), SamplerKind::Tpe, 1, |_, _| {
        TrialOutcome::Completed(0.3)
    })
    .unwrap();
    assert_eq!(one.trials.len(), 1);
    assert_eq!(one.best_trial, Some(0));

    let nan = run_study("u", &lr_space(), budget(4), PrunerConfig::default(), SamplerKind::Tpe, 1, |_, r| {
        r.report(1, f64::NAN);
        TrialOutcome::Completed(f64::NAN)
    })
    .unwrap();
    assert_eq!(nan.count(TrialState::Completed), 0);
    assert!(nan.best_trial.is_none());

    // later trials that are worse than the median get pruned
    let mixed = run_study("u", &lr_space(), budget(12), PrunerConfig::default(), SamplerKind::Random, 3, |a, r| {
        let v = a[LR].as_f64().unwrap().log10().abs();
        for step in 1..=3 {
            if r.report(step, v / step as f64) {
                return TrialOutcome::Pruned;
            }
        }
        TrialOutcome::Completed(v / 3.0)
    })
    .unwrap();
    assert!(mixed.count(TrialState::Completed) > 0);
    assert!(mixed.count(TrialState::Pruned) > 0);
    let best = mixed.best().unwrap();
    assert!(mixed
        .trials
        .iter()
        .filter(|t| t.state == TrialState::Completed)
        .all(|t| t.final_value.unwrap() >= best.final_value.unwrap()));
}
