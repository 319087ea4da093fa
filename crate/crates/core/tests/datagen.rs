mod common;

use plume_core::datagen::*;
use plume_core::profiling::{configure_preprocessing, profile_dataset, profile_structure};
use plume_core::{CoreError, Qoi};

fn small_physics() -> PhysicsConfig {
    PhysicsConfig::default()
}

#[test]
fn grf_ensemble_matches_target_moments() {
    let grid = GridSpec::new_2d(32, 32);
    let geo = GeostatConfig::default();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for s in 0..200 {
        for v in generate_log_permeability(&grid, &geo, sample_seed(11, s)).unwrap() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let mean = sum / n;
    let std = (sq / n - mean * mean).sqrt();
    assert!((2.4..=2.6).contains(&mean), "mean {mean}");
    assert!((1.35..=1.65).contains(&std), "std {std}");
}

#[test]
fn grf_is_deterministic_and_degenerates_to_mean() {
    let grid = GridSpec::new_2d(16, 12);
    let geo = GeostatConfig::default();
    assert_eq!(
        generate_log_permeability(&grid, &geo, 5).unwrap(),
        generate_log_permeability(&grid, &geo, 5).unwrap()
    );
    let flat = GeostatConfig { std_logk: 0.0, ..geo };
    assert!(generate_log_permeability(&grid, &flat, 5).unwrap().iter().all(|&v| v == 2.5));
    let bad = GeostatConfig { corr_len_y: 0.0, ..geo };
    assert!(matches!(generate_log_permeability(&grid, &bad, 5), Err(CoreError::Parameter(_))));
}

#[test]
fn porosity_relation_and_cutoffs() {
    let geo = GeostatConfig::default();
    assert!((porosity_from_logk(2.5, &geo) - 0.155).abs() < 1e-12);
    assert_eq!(porosity_from_logk(-2.0, &geo), 0.05);
    assert_eq!(porosity_from_logk(10.0, &geo), 0.30);
}

#[test]
fn heterogeneous_solve_matches_dense_lu() {
    let o = common::darcy_dense_oracle();
    assert!(o.matrix_rel_err <= 1e-12, "operator entry mismatch {}", o.matrix_rel_err);
    assert!(o.solution_max_abs <= 1e-10, "max abs diff {} (scale {})", o.solution_max_abs, o.scale);
}

#[test]
fn homogeneous_left_right_gradient_is_linear() {
    let err = common::linear_profile_error();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn point_source_is_rotation_symmetric() {
    let grid = GridSpec::new_2d(9, 9);
    let perm = vec![20.0; grid.cells()];
    let solver = SolverConfig::default();
    let s = solve_darcy_pressure(&perm, &grid, &WellSpec { rate: 1e-3 }, &BoundarySpec::lateral(0.0), &solver).unwrap();
    let max = s.x.iter().cloned().fold(0.0, f64::max);
    for i in 0..9 {
        for j in 0..9 {
            let a = s.x[grid.idx(i, j, 0)];
            let b = s.x[grid.idx(8 - j, i, 0)];
            assert!((a - b).abs() <= 1e-10 * max, "{i},{j}");
        }
    }
}

#[test]
fn maximum_principle_without_sources() {
    assert_eq!(common::maximum_principle_violations(100, 99), 0);
}

#[test]
fn all_no_flow_is_a_configuration_error() {
    let grid = GridSpec::new_2d(4, 4);
    let r = DarcyOperator::assemble(&[1.0; 16], &grid, &BoundarySpec { faces: [None; 6] }, 1e-3);
    assert!(matches!(r, Err(CoreError::Config(_))), "{r:?}");
}

#[test]
fn plume_starts_at_well_and_is_radially_monotone() {
    let grid = GridSpec::new_2d(16, 16);
    let physics = small_physics();
    let perm = vec![30.0; grid.cells()];
    let phi = vec![0.15; grid.cells()];
    let p = solve_darcy_pressure(&perm, &grid, &physics.well, &BoundarySpec::lateral(0.0), &physics.solver).unwrap();
    let sat = propagate_saturation(&perm, &phi, &p.x, &grid, &physics, 6).unwrap();
    let wells = physics.well.cells(&grid);
    for (c, s) in sat[0].iter().enumerate() {
        if wells.contains(&c) {
            assert!(*s > 0.0);
        } else {
            assert_eq!(*s, 0.0);
        }
    }
    let (cx, cy) = physics.well.center(&grid);
    let dist = |c: usize| {
        let (i, j) = (c / grid.ny, c % grid.ny);
        ((i as f64 + 0.5) * grid.dx - cx).hypot((j as f64 + 0.5) * grid.dy - cy)
    };
    for s in &sat {
        for a in 0..grid.cells() {
            for b in 0..grid.cells() {
                if dist(a) < dist(b) - 1e-9 {
                    assert!(s[a] >= s[b] - 1e-12, "cells {a} and {b}");
                }
            }
        }
    }
    assert!(propagate_saturation(&perm, &phi, &p.x, &grid, &physics, 0).is_err());
}

#[test]
fn sequential_split_sizes() {
    assert_eq!(Split::sequential(1000).sizes(), (700, 100, 200));
    assert_eq!(Split::sequential(10).sizes(), (7, 1, 2));
    assert_eq!(Split::sequential(200).sizes(), (140, 20, 40));
}

#[test]
fn dataset_round_trip_and_determinism() {
    let grid = GridSpec::new_2d(8, 8);
    let geo = GeostatConfig::default();
    let physics = small_physics();
    assert!(build_dataset(5, &grid, &geo, &physics, 3, 1).is_err());
    let a = build_dataset(12, &grid, &geo, &physics, 3, 4).unwrap();
    let b = build_dataset(12, &grid, &geo, &physics, 3, 4).unwrap();
    assert_eq!(a.manifest, b.manifest);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, a.manifest);
    assert_eq!(back.saturation, a.saturation);
    std::fs::write(dir.path().join("pressure.f32"), vec![0u8; 12 * 3 * 64 * 4]).unwrap();
    match read_dataset(dir.path()) {
        Err(CoreError::Structure { array, .. }) => assert_eq!(array, "pressure"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn profile_uses_training_split_and_detects_bad_shapes() {
    let grid = GridSpec::new_2d(8, 8);
    let mut bundle = build_dataset(20, &grid, &GeostatConfig::default(), &small_physics(), 3, 2).unwrap();
    let p = profile_dataset(&bundle).unwrap();
    assert_eq!(p.stats_split, "train");
    let train: Vec<f64> = bundle.manifest.split.train.iter()
        .flat_map(|&i| bundle.target_sample(Qoi::Pressure, i).iter().map(|&v| v as f64))
        .collect();
    let want = train.iter().sum::<f64>() / train.len() as f64;
    assert!((p.qoi_stats[&Qoi::Pressure].mean - want).abs() < 1e-6 * want);

    // spiking a test sample must not move the statistics
    let c = bundle.cells() * bundle.t();
    let t0 = bundle.manifest.split.test[0];
    for v in &mut bundle.pressure[t0 * c..(t0 + 1) * c] {
        *v = 9e9;
    }
    assert_eq!(profile_dataset(&bundle).unwrap().qoi_stats, p.qoi_stats);

    let mut m = bundle.manifest.clone();
    m.arrays.get_mut("saturation").unwrap().shape[1] = 99;
    match profile_structure(&m) {
        Err(CoreError::Structure { array, .. }) => assert_eq!(array, "saturation"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn constant_pressure_profile() {
    let grid = GridSpec::new_2d(8, 8);
    let mut bundle = build_dataset(10, &grid, &GeostatConfig::default(), &small_physics(), 2, 2).unwrap();
    for v in &mut bundle.pressure {
        *v = 2.0814e7;
    }
    let p = profile_dataset(&bundle).unwrap();
    let s = p.qoi_stats[&Qoi::Pressure];
    assert_eq!(s.std, 0.0);
    assert_eq!((s.min, s.max), (s.mean, s.mean));
    let pre = configure_preprocessing(&p).unwrap();
    assert!((pre.pressure.mu_p - 208.14).abs() < 1e-9);
    assert_eq!(pre.pressure.sigma_p, 0.0);
}

#[test]
fn desk_saturation_is_sparse() {
    let grid = GridSpec::new_2d(32, 32);
    let bundle = build_dataset(20, &grid, &GeostatConfig::default(), &small_physics(), 8, 7).unwrap();
    let p = profile_dataset(&bundle).unwrap();
    let f = p.sparsity(Qoi::Saturation).unwrap();
    assert!(f > 0.9, "fraction near zero {f}");
}
