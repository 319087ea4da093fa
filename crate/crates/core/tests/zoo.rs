mod common;

use common::{gradient_check, CheckLoss};
use plume_core::hpo::{Assignment, Value, BASE_CHANNELS};
use plume_core::zoo::{estimate_memory, fourier_modes, list_models, model_card, Family, Model, ModelSpec};
use plume_core::CoreError;
use plume_tensor::{Graph, Tensor};

fn bc(v: i64) -> Assignment {
    let mut hp = Assignment::new();
    hp.insert(BASE_CHANNELS.into(), Value::Int(v));
    hp
}

#[test]
fn eight_cards() {
    let cards = list_models();
    assert_eq!(cards.len(), 8);
    for c in &cards {
        assert!(c.search_space.validate().is_ok(), "{}", c.name);
        assert_eq!(c.supports_aux_bce, c.name.supports_aux_bce());
    }
}

#[test]
fn every_family_maps_input_to_timesteps() {
    for family in Family::ALL {
        let spec = ModelSpec::new(family, [16, 16, 1], 8, 8);
        let model = Model::build(&spec, 1).unwrap();
        let mut g = Graph::new(&model.params);
        let x = g.input(Tensor::full(&[1, 1, 16, 16, 1], 0.3));
        let y = model.forward(&mut g, x);
        assert_eq!(g.shape(y), vec![1, 8, 16, 16, 1], "{family}");
        assert!(g.value(y).all_finite(), "{family}");
    }
}

#[test]
fn zero_initialised_residual_branches_are_finite() {
    let mut spec = ModelSpec::new(Family::ResUNet, [16, 16, 1], 4, 8);
    spec.zero_init_residual = true;
    let model = Model::build(&spec, 2).unwrap();
    let mut g = Graph::new(&model.params);
    let x = g.input(Tensor::full(&[2, 1, 16, 16, 1], -0.7));
    let y = model.forward(&mut g, x);
    assert!(g.value(y).all_finite());
}

#[test]
fn odd_grid_names_the_dimension() {
    let spec = ModelSpec::new(Family::UNet, [16, 14, 1], 2, 8);
    match Model::build(&spec, 0) {
        Err(CoreError::Shape { dim, .. }) => assert_eq!(dim, "y"),
        other => panic!("{other:?}"),
    }
    let spec = ModelSpec::new(Family::UNet, [10, 16, 1], 2, 8);
    match Model::build(&spec, 0) {
        Err(CoreError::Shape { dim, .. }) => assert_eq!(dim, "x"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fourier_modes_stay_below_nyquist() {
    for n in [2usize, 4, 8, 9, 32, 80] {
        let m = fourier_modes([n, n, 1]);
        assert!(m[0] <= n / 2 && m[0] >= 1);
        assert_eq!(m[2], 1);
    }
}

/// conv3x3 (no bias) + norm, twice.
fn double_conv(ci: usize, co: usize) -> usize {
    9 * ci * co + 2 * co + 9 * co * co + 2 * co
}

#[test]
fn unet_parameter_count_matches_layer_inventory() {
    let (b, t) = (8usize, 8usize);
    let enc = double_conv(1, b) + double_conv(b, 2 * b) + double_conv(2 * b, 4 * b);
    let up = 4 * b * 2 * b + 2 * b * b;
    let dec = double_conv(4 * b, 2 * b) + double_conv(2 * b, b);
    let head = b * t + t;
    let spec = ModelSpec::new(Family::UNet, [16, 16, 1], t, b);
    assert_eq!(spec.levels, 2);
    assert_eq!(Model::build(&spec, 0).unwrap().param_count(), enc + up + dec + head);
}

#[test]
fn resunet_3d_paper_scale_parameter_count() {
    let est = estimate_memory(Family::ResUNet, &bc(16), [80, 80, 20], 31, 1, usize::MAX);
    let p = est.param_count as f64;
    assert!((p - 4.6e6).abs() <= 0.25 * 4.6e6, "{p}");
    assert!(est.feasible);
    let tight = estimate_memory(Family::ResUNet, &bc(16), [80, 80, 20], 31, 1, 1 << 20);
    assert!(!tight.feasible && tight.reason.is_some());
}

#[test]
fn parameter_count_strictly_grows_with_base_channels() {
    for family in Family::ALL {
        let counts: Vec<usize> = [8, 16, 32]
            .iter()
            .map(|&b| estimate_memory(family, &bc(b), [32, 32, 1], 8, 1, usize::MAX).param_count)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{family}: {counts:?}");
    }
}

#[test]
fn estimate_memory_is_shape_only_and_deterministic() {
    let a = estimate_memory(Family::UFNO, &bc(16), [32, 32, 1], 8, 4, 1 << 30);
    let b = estimate_memory(Family::UFNO, &bc(16), [32, 32, 1], 8, 4, 1 << 30);
    assert_eq!(a, b);
    let one = estimate_memory(Family::UFNO, &bc(16), [32, 32, 1], 8, 1, 1 << 30);
    assert_eq!(a.peak_activation_bytes, 4 * one.peak_activation_bytes);
    assert_eq!(a.estimated_bytes, a.peak_activation_bytes + 16 * a.param_count);
}

#[test]
fn card_spaces_include_bce_only_where_supported() {
    for family in Family::ALL {
        let card = model_card(family);
        assert_eq!(card.search_space.get("lambda_bce").is_some(), family.supports_aux_bce());
    }
}

#[test]
fn gradients_match_finite_differences_for_every_family() {
    for family in Family::ALL {
        for kind in [CheckLoss::Pressure, CheckLoss::Saturation] {
            let err = gradient_check(family, kind, 12, 3);
            assert!(err <= 1e-3, "{family} {kind:?}: relative error {err}");
        }
    }
}
