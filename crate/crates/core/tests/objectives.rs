use plume_core::profiling::{denormalize_pressure, normalize_pressure, PressureNormalization, NORM_EPSILON, PRESSURE_SCALE};
use plume_core::training::{compute_metrics, early_stop_score, pressure_loss, saturation_loss, sigmoid, EarlyStopper};
use proptest::prelude::*;

fn paper_norm() -> PressureNormalization {
    PressureNormalization {
        scale_divisor: PRESSURE_SCALE,
        mu_p: 208.14,
        sigma_p: 6.01,
        epsilon: NORM_EPSILON,
    }
}

#[test]
fn saturation_loss_at_zero_logit_is_scaled_ln2() {
    let (v, _) = saturation_loss(&[0.0], &[0.5], 0.01, 1e-4).unwrap();
    assert!((v - 0.01 * std::f64::consts::LN_2).abs() <= 1e-12, "{v}");
}

#[test]
fn saturation_loss_vanishes_for_saturated_logit() {
    let (v, _) = saturation_loss(&[40.0], &[1.0], 0.01, 1e-4).unwrap();
    assert!(v <= 1e-10, "{v}");
}

#[test]
fn saturation_loss_matches_two_pass_sum() {
    let logits = [-3.0, -0.2, 0.0, 0.7, 2.5, -8.0];
    let target = [0.0, 0.1, 0.5, 0.0, 0.9, 5e-5];
    let lambda = 0.037;
    let (v, _) = saturation_loss(&logits, &target, lambda, 1e-4).unwrap();
    let n = logits.len() as f64;
    let mut mse = 0.0;
    for (x, s) in logits.iter().zip(&target) {
        let p = 1.0 / (1.0 + (-x).exp());
        mse += (p - s) * (p - s);
    }
    let mut bce = 0.0;
    for (x, s) in logits.iter().zip(&target) {
        let p: f64 = 1.0 / (1.0 + (-x).exp());
        let y = if *s > 1e-4 { 1.0 } else { 0.0 };
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    let want = mse / n + lambda * bce / n;
    assert!((v - want).abs() < 1e-12, "{v} vs {want}");
}

#[test]
fn saturation_loss_rejects_out_of_range_target() {
    assert!(saturation_loss(&[0.0], &[1.5], 0.01, 1e-4).is_err());
    assert!(saturation_loss(&[0.0, 1.0], &[0.5], 0.01, 1e-4).is_err());
}

#[test]
fn pressure_loss_cases() {
    assert_eq!(pressure_loss(&[0.3, -1.2], &[0.3, -1.2]).unwrap().0, 0.0);
    assert_eq!(pressure_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap().0, 1.0);
    let (v, g) = pressure_loss(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
    assert_eq!(v, 5.0);
    assert_eq!(g, vec![1.0, 3.0]);
    assert!(pressure_loss(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let logits = [-1.3, 0.4, 2.0, -0.1];
    let target = [0.0, 0.3, 0.8, 0.05];
    let (_, g) = saturation_loss(&logits, &target, 0.05, 1e-4).unwrap();
    let (_, gp) = pressure_loss(&logits, &target).unwrap();
    let h = 1e-6;
    for i in 0..logits.len() {
        let mut a = logits;
        let mut b = logits;
        a[i] += h;
        b[i] -= h;
        let fd = (saturation_loss(&a, &target, 0.05, 1e-4).unwrap().0
            - saturation_loss(&b, &target, 0.05, 1e-4).unwrap().0)
            / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-8, "sat {i}: {fd} vs {}", g[i]);
        let fd = (pressure_loss(&a, &target).unwrap().0 - pressure_loss(&b, &target).unwrap().0) / (2.0 * h);
        assert!((fd - gp[i]).abs() < 1e-8, "p {i}: {fd} vs {}", gp[i]);
    }
}

#[test]
fn early_stop_score_is_a_sum() {
    assert_eq!(early_stop_score(0.2, 0.3).unwrap(), 0.5);
    assert_eq!(early_stop_score(0.0, 0.0).unwrap(), 0.0);
    assert!(early_stop_score(f64::NAN, 0.3).is_err());
}

#[test]
fn early_stopper_scripted_schedule() {
    assert_eq!(EarlyStopper::replay(2, &[1.0, 0.9, 0.9, 0.9, 0.9, 0.9]), Some(4));
}

#[test]
fn metrics_identity_and_mean_predictor() {
    let truth = [1.0, 2.0, 3.0, 4.0];
    let m = compute_metrics(&truth, &truth, 2).unwrap();
    assert_eq!((m.r2, m.rmse, m.rel_l2), (1.0, 0.0, 0.0));
    let m = compute_metrics(&[2.5; 4], &truth, 2).unwrap();
    assert!(m.r2.abs() < 1e-15);
    assert!(compute_metrics(&[1.0; 4], &[1.0; 4], 1).is_err());
}

#[test]
fn normalization_paper_constants() {
    let cfg = paper_norm();
    assert!(normalize_pressure(2.0814e7, &cfg).abs() <= 1e-12);
    let z = normalize_pressure(2.1415e7, &cfg);
    assert!((z - 1.0).abs() < 1e-6, "{z}");
    let guarded = PressureNormalization { sigma_p: 0.0, ..cfg };
    let z = normalize_pressure(1e5 * 208.14, &guarded);
    assert!(z.is_finite() && z.abs() < 1e-6, "{z}");
}

proptest! {
    #[test]
    fn normalization_round_trips(p in 1.5e7f64..3.0e7) {
        let cfg = paper_norm();
        let back = denormalize_pressure(normalize_pressure(p, &cfg), &cfg);
        prop_assert!(((back - p) / p).abs() <= 1e-9);
    }

    #[test]
    fn saturation_loss_is_non_negative_and_finite(
        pairs in prop::collection::vec((-60.0f64..60.0, 0.0f64..=1.0), 1..20),
        lambda in 0.0f64..1.0,
    ) {
        let (x, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (v, g) = saturation_loss(&x, &s, lambda, 1e-4).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
        prop_assert!(g.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn sigmoid_is_bounded(x in -800.0f64..800.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
