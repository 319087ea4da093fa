use std::sync::Arc;

use plume_core::datagen::{build_dataset, GeostatConfig, GridSpec, PhysicsConfig};
use plume_core::profiling::{configure_preprocessing, profile_dataset};
use plume_core::training::*;
use plume_core::zoo::{Family, Model, ModelSpec};
use plume_core::Qoi;
use plume_tensor::ParamStore;

struct Scripted {
    val: Vec<f64>,
    grads: Vec<f64>,
}

impl Learner for Scripted {
    fn train_epoch(&mut self, _epoch: u32) -> EpochStats {
        EpochStats {
            train_loss: 0.0,
            grad_norms: self.grads.clone(),
            post_clip_norms: self.grads.iter().map(|g| g.min(1.0)).collect(),
        }
    }

    fn validate(&mut self, epoch: u32) -> f64 {
        self.val[(epoch as usize - 1).min(self.val.len() - 1)]
    }

    fn snapshot(&self) -> ParamStore {
        ParamStore::new()
    }
}

fn opts(epochs: u32, patience: u32) -> LoopOptions {
    LoopOptions {
        epochs,
        patience,
        provenance: Provenance {
            card: "mock".into(),
            hp: Default::default(),
            round: 1,
        },
    }
}

#[test]
fn scripted_schedule_stops_early() {
    let mut l = Scripted {
        val: vec![1.0, 0.9, 0.9, 0.9, 0.9],
        grads: vec![0.5],
    };
    let out = train(&mut l, &opts(20, 2), &mut |_| false);
    assert_eq!(out.result.stopped_reason, StopReason::EarlyStop);
    assert_eq!(out.result.last_epoch(), 4);
    assert_eq!(out.result.checkpoints.best.unwrap().epoch, 2);
}

#[test]
fn resume_continues_the_epoch_counter() {
    let mut l = Scripted {
        val: vec![1.0, 0.8, 0.7, 0.6, 0.5, 0.4],
        grads: vec![0.5],
    };
    let first = train(&mut l, &opts(3, 5), &mut |_| false);
    assert_eq!(first.result.stopped_reason, StopReason::MaxEpochs);
    let more = resume(&mut l, first, 3, 5);
    let epochs: Vec<u32> = more.result.history.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(more.result.checkpoints.best.unwrap().epoch, 6);
}

#[test]
fn instability_signals() {
    let mut nan = Scripted {
        val: vec![1.0, f64::NAN],
        grads: vec![0.5],
    };
    let out = train(&mut nan, &opts(10, 5), &mut |_| false);
    assert_eq!(out.result.stopped_reason, StopReason::Instability);
    assert_eq!(out.result.instability[0].kind, InstabilityKind::NonFiniteLoss);
    assert_eq!(out.result.instability[0].epoch, 2);

    let mut boom = Scripted {
        val: vec![1.0],
        grads: vec![2e3, 3e3, 5e3],
    };
    let out = train(&mut boom, &opts(10, 5), &mut |_| false);
    assert_eq!(out.result.instability[0].kind, InstabilityKind::GradientExplosion);

    let mut flat = Scripted {
        val: vec![1.0],
        grads: vec![1e-12, 1e-13],
    };
    let out = train(&mut flat, &opts(10, 5), &mut |_| false);
    assert_eq!(out.result.instability[0].kind, InstabilityKind::VanishingGradient);
}

#[test]
fn pruning_hook_stops_the_run() {
    let mut l = Scripted {
        val: vec![1.0, 0.9, 0.8],
        grads: vec![0.5],
    };
    let out = train(&mut l, &opts(10, 5), &mut |r| r.epoch == 2);
    assert_eq!(out.result.stopped_reason, StopReason::Pruned);
    assert_eq!(out.result.last_epoch(), 2);
}

#[test]
fn non_finite_history_serialises_as_null() {
    let mut nan = Scripted {
        val: vec![f64::NAN],
        grads: vec![0.5],
    };
    let out = train(&mut nan, &opts(3, 5), &mut |_| false);
    let text = serde_json::to_string(&out.result).unwrap();
    assert!(text.contains("\"val_loss\":null"), "{text}");
    let back: TrainResult = serde_json::from_str(&text).unwrap();
    assert!(back.history[0].val_loss.is_nan());
}

fn toy(qoi: Qoi) -> Arc<PreparedData> {
    let grid = GridSpec::new_2d(8, 8);
    let bundle = build_dataset(20, &grid, &GeostatConfig::default(), &PhysicsConfig::default(), 2, 3).unwrap();
    let pre = configure_preprocessing(&profile_dataset(&bundle).unwrap()).unwrap();
    Arc::new(prepare_data(&bundle, qoi, &pre).unwrap())
}

#[test]
fn real_learner_reduces_pressure_loss() {
    let data = toy(Qoi::Pressure);
    let model = Model::build(&ModelSpec::new(Family::UNet, [8, 8, 1], 2, 8), 1).unwrap();
    let cfg = TrainConfig::pipeline(3e-3, 1e-5, 4, 1);
    let mut l = ModelLearner::new(model, &cfg, data, LearnerFaults::default()).unwrap();
    let out = train(&mut l, &opts(12, 12), &mut |_| false);
    let h = &out.result.history;
    assert!(h.last().unwrap().val_loss < h[0].val_loss, "{h:?}");
    assert!(out.best_weights.is_some());
}

#[test]
fn huge_learning_rate_aborts_as_instability() {
    // without the occupancy term the sigmoid saturates and gradients vanish;
    // the pressure objective explodes instead
    for (qoi, expect) in [
        (Qoi::Saturation, InstabilityKind::VanishingGradient),
        (Qoi::Pressure, InstabilityKind::GradientExplosion),
    ] {
        let model = Model::build(&ModelSpec::new(Family::UNet, [8, 8, 1], 2, 8), 1).unwrap();
        let cfg = TrainConfig::pipeline(1e3, 0.0, 2, 1);
        let mut l = ModelLearner::new(model, &cfg, toy(qoi), LearnerFaults::default()).unwrap();
        let out = train(&mut l, &opts(30, 30), &mut |_| false);
        assert_eq!(out.result.stopped_reason, StopReason::Instability, "{qoi}");
        assert_eq!(out.result.instability[0].kind, expect, "{qoi}");
    }
}

#[test]
fn injected_faults_surface() {
    let data = toy(Qoi::Pressure);
    let model = Model::build(&ModelSpec::new(Family::UNet, [8, 8, 1], 2, 8), 1).unwrap();
    let cfg = TrainConfig::pipeline(1e-3, 0.0, 4, 1);
    let faults = LearnerFaults {
        nan_loss_epoch: Some(2),
        ..LearnerFaults::default()
    };
    let mut l = ModelLearner::new(model.clone(), &cfg, data.clone(), faults).unwrap();
    let out = train(&mut l, &opts(5, 5), &mut |_| false);
    assert_eq!(out.result.instability[0].epoch, 2);

    let faults = LearnerFaults {
        grad_scale: 1e7,
        ..LearnerFaults::default()
    };
    let mut l = ModelLearner::new(model, &cfg, data, faults).unwrap();
    let out = train(&mut l, &opts(5, 5), &mut |_| false);
    assert_eq!(out.result.instability[0].kind, InstabilityKind::GradientExplosion);
}
