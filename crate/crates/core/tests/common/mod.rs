//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use plume_core::hpo::{
    median_prune_decision, run_study, Domain, HpoBudget, ParamDef, PrunerConfig, SamplerKind, SearchSpace,
    StudyRecord, TrialOutcome, TrialRecord, TrialState,
};
use nalgebra::{DMatrix, DVector};
use plume_core::datagen::{
    solve_darcy_pressure, well_source, BoundarySpec, DarcyOperator, GridSpec, SolverConfig, WellSpec, MD_TO_M2,
};
use plume_core::training::{pressure_loss, saturation_loss};
use plume_core::zoo::{Family, Model, ModelSpec};
use plume_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckLoss {
    Pressure,
    Saturation,
}

fn loss_of(kind: CheckLoss, out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    match kind {
        CheckLoss::Pressure => pressure_loss(out, target).unwrap(),
        CheckLoss::Saturation => saturation_loss(out, target, 0.05, 1e-4).unwrap(),
    }
}

fn eval(model: &Model, params: &ParamStore, x: &Tensor, target: &[f64], kind: CheckLoss) -> f64 {
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let y = model.forward(&mut g, xv);
    loss_of(kind, g.value(y).data(), target).0
}

/// Relative error `|g_a - g_fd| / max(|g_a|, |g_fd|)` over `probes` sampled
/// parameter entries of `family` at 8x8, T=2.
pub fn gradient_check(family: Family, kind: CheckLoss, probes: usize, seed: u64) -> f64 {
    let spec = ModelSpec::new(family, [8, 8, 1], 2, 4);
    let model = Model::build(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let x = Tensor::from_vec(&[1, 1, 8, 8, 1], (0..64).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let target: Vec<f64> = (0..2 * 64)
        .map(|_| match kind {
            CheckLoss::Pressure => rng.random_range(-1.0..1.0),
            CheckLoss::Saturation => {
                if rng.random_bool(0.6) {
                    0.0
                } else {
                    rng.random_range(0.0..0.5)
                }
            }
        })
        .collect();

    let analytic = {
        let mut g = Graph::new(&model.params);
        let xv = g.input(x.clone());
        let y = model.forward(&mut g, xv);
        let (v, grad) = loss_of(kind, g.value(y).data(), &target);
        let shape = g.shape(y);
        let root = g.external_loss(y, v, Tensor::from_vec(&shape, grad).unwrap());
        g.backward(root).params
    };

    let sizes: Vec<usize> = model.params.values().iter().map(Tensor::numel).collect();
    let mut params = model.params.clone();
    let (mut num, mut ga2, mut gf2) = (0.0, 0.0, 0.0);
    let h = 1e-5;
    for _ in 0..probes {
        // bias towards tensors with non-zero gradient so every probe counts
        let mut pick = None;
        for _ in 0..20 {
            let t = rng.random_range(0..sizes.len());
            let e = rng.random_range(0..sizes[t]);
            pick = Some((t, e));
            if analytic[t].data()[e].abs() > 1e-9 {
                break;
            }
        }
        let (t, e) = pick.unwrap();
        let orig = params.values()[t].data()[e];
        params.values_mut()[t].data_mut()[e] = orig + h;
        let up = eval(&model, &params, &x, &target, kind);
        params.values_mut()[t].data_mut()[e] = orig - h;
        let down = eval(&model, &params, &x, &target, kind);
        params.values_mut()[t].data_mut()[e] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[t].data()[e];
        num += (a - fd) * (a - fd);
        ga2 += a * a;
        gf2 += fd * fd;
    }
    assert!(ga2 > 0.0, "{family}: every probed gradient is zero");
    num.sqrt() / ga2.sqrt().max(gf2.sqrt())
}

fn trial(id: u32, values: &[Option<f64>]) -> TrialRecord {
    TrialRecord {
        trial_id: id,
        params: Default::default(),
        intermediate: values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i as u32 + 1, v)))
            .collect(),
        state: TrialState::Completed,
        final_value: None,
        failure: None,
    }
}

/// Median by repeatedly discarding the extremes; independent of sorting.
fn median_by_trimming(mut v: Vec<f64>) -> f64 {
    while v.len() > 2 {
        let (imin, _) = v.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &x)| if x < b.1 { (i, x) } else { b });
        v.remove(imin);
        let (imax, _) = v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        v.remove(imax);
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn brute_force_prune(current: &[Option<f64>], prior: &[Vec<Option<f64>>], step: u32, cfg: &PrunerConfig) -> bool {
    if step < cfg.n_warmup {
        return false;
    }
    let Some(v) = current.get(step as usize - 1).copied().flatten() else {
        return false;
    };
    let others: Vec<f64> = prior
        .iter()
        .filter_map(|t| t.get(step as usize - 1).copied().flatten())
        .filter(|x| x.is_finite())
        .collect();
    if others.is_empty() || others.len() < cfg.n_min_trials {
        return false;
    }
    if v.is_nan() {
        return true;
    }
    v > median_by_trimming(others)
}

/// Exhaustive comparison of the median pruner with a brute-force comparator
/// over up to 4 trials and 4 steps. Returns (cases checked, mismatches).
pub fn pruner_enumeration() -> (usize, usize) {
    let cells = [None, Some(0.2), Some(0.5), Some(0.8), Some(f64::NAN)];
    let mut checked = 0;
    let mut bad = 0;
    for steps in 1..=4u32 {
        for n_prior in 0..=3usize {
            for step in 1..=steps {
                // the decision at `step` only reads values at `step`; the other
                // steps carry distinct filler values
                let combos = cells.len().pow(n_prior as u32 + 1);
                for code in 0..combos {
                    let mut c = code;
                    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
                    for r in 0..=n_prior {
                        let cell = cells[c % cells.len()];
                        c /= cells.len();
                        let row: Vec<Option<f64>> = (1..=steps)
                            .map(|s| if s == step { cell } else { Some(0.1 * s as f64 + 0.01 * r as f64) })
                            .collect();
                        rows.push(row);
                    }
                    let current = rows.pop().unwrap();
                    let mut study = StudyRecord::new("x", SearchSpace::new(vec![]), HpoBudget::default(), 0, SamplerKind::Random);
                    study.trials = rows.iter().enumerate().map(|(i, r)| trial(i as u32, r)).collect();
                    let cur = trial(99, &current);
                    for n_warmup in 0..=2 {
                        for n_min_trials in 0..=3 {
                            let cfg = PrunerConfig { n_warmup, n_min_trials };
                            checked += 1;
                            if median_prune_decision(&cur, &study, step, &cfg)
                                != brute_force_prune(&current, &rows, step, &cfg)
                            {
                                bad += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (checked, bad)
}

pub fn synthetic_space() -> SearchSpace {
    SearchSpace::new(vec![
        ParamDef {
            name: "lr".into(),
            domain: Domain::LogUniform { lo: 1e-5, hi: 1e-1 },
        },
        ParamDef {
            name: "y".into(),
            domain: Domain::Uniform { lo: -2.0, hi: 2.0 },
        },
    ])
}

/// Shifted quadratic bowl in (log10 lr, y), minimum 0 at lr = 1e-3, y = 0.7.
pub fn synthetic_objective(a: &plume_core::hpo::Assignment) -> f64 {
    let u = a["lr"].as_f64().unwrap().log10() + 3.0;
    let y = a["y"].as_f64().unwrap() - 0.7;
    u * u + 3.0 * y * y
}

fn best_after(sampler: SamplerKind, seed: u64, n: u32) -> f64 {
    let budget = HpoBudget {
        n_trials: n,
        epochs_per_trial: 1,
        train_batches: 1,
        val_batches: 1,
    };
    let study = run_study("synthetic", &synthetic_space(), budget, PrunerConfig::default(), sampler, seed, |a, _| {
        TrialOutcome::Completed(synthetic_objective(a))
    })
    .unwrap();
    study.best().and_then(|t| t.final_value).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median best-after-30 over 20 seeds, for TPE and random search.
pub fn tpe_vs_random(seed_base: u64) -> (f64, f64) {
    let seeds: Vec<u64> = (0..20).map(|i| seed_base + i).collect();
    let tpe = median(seeds.iter().map(|&s| best_after(SamplerKind::Tpe, s, 30)).collect());
    let rnd = median(seeds.iter().map(|&s| best_after(SamplerKind::Random, s, 30)).collect());
    (tpe, rnd)
}

fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| (rng.random_range(-3.0..6.0f64)).exp()).collect()
}

pub struct DarcyOracle {
    /// Largest operator entry difference relative to its diagonal.
    pub matrix_rel_err: f64,
    /// Largest pressure difference against dense LU, in Pa.
    pub solution_max_abs: f64,
    pub scale: f64,
}

/// Solves a heterogeneous 4x4 problem and compares it with an independently
/// assembled two-point flux matrix factorized by dense LU. Boundary pressures
/// and the well rate are O(1) in Pa, so an absolute tolerance is meaningful.
pub fn darcy_dense_oracle() -> DarcyOracle {
    let grid = GridSpec::new_2d(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let perm = random_perm(&mut rng, 16);
    let boundary = BoundarySpec {
        faces: [Some(1.0), Some(-0.2), None, Some(0.3), None, None],
    };
    let solver = SolverConfig::default();
    let op = DarcyOperator::assemble(&perm, &grid, &boundary, solver.viscosity).unwrap();
    let q = well_source(&grid, &WellSpec { rate: 1e-10 });
    let b: Vec<f64> = q.iter().zip(op.boundary_rhs()).map(|(a, c)| a + c).collect();
    let x = op.solve(&b, None, None, &solver).unwrap().x;

    let vol_area = |d: usize| match d {
        0 => grid.dy * grid.dz / grid.dx,
        1 => grid.dx * grid.dz / grid.dy,
        _ => grid.dx * grid.dy / grid.dz,
    };
    let k = |c: usize| perm[c] * MD_TO_M2 / solver.viscosity;
    let mut a = DMatrix::<f64>::zeros(16, 16);
    let mut rhs = DVector::<f64>::zeros(16);
    for i in 0..4 {
        for j in 0..4 {
            let c = grid.idx(i, j, 0);
            rhs[c] += q[c];
            let nbrs = [
                (i.checked_sub(1).map(|ii| grid.idx(ii, j, 0)), 0, 0),
                ((i + 1 < 4).then(|| grid.idx(i + 1, j, 0)), 0, 1),
                (j.checked_sub(1).map(|jj| grid.idx(i, jj, 0)), 1, 2),
                ((j + 1 < 4).then(|| grid.idx(i, j + 1, 0)), 1, 3),
            ];
            for (nb, d, face) in nbrs {
                match nb {
                    Some(o) => {
                        let t = vol_area(d) * 2.0 * k(c) * k(o) / (k(c) + k(o));
                        a[(c, c)] += t;
                        a[(c, o)] -= t;
                    }
                    None => {
                        if let Some(pb) = boundary.faces[face] {
                            let t = vol_area(d) * 2.0 * k(c);
                            a[(c, c)] += t;
                            rhs[c] += t * pb;
                        }
                    }
                }
            }
        }
    }
    let dense = op.to_dense();
    let mut matrix_rel_err: f64 = 0.0;
    for r in 0..16 {
        for c in 0..16 {
            matrix_rel_err = matrix_rel_err.max((dense[r][c] - a[(r, c)]).abs() / a[(r, r)].abs());
        }
    }
    let want = a.lu().solve(&rhs).unwrap();
    DarcyOracle {
        matrix_rel_err,
        solution_max_abs: x.iter().zip(want.iter()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max),
        scale: want.iter().map(|v| v.abs()).fold(0.0, f64::max),
    }
}

/// Max deviation from the exact linear profile between fixed left/right faces.
pub fn linear_profile_error() -> f64 {
    let grid = GridSpec::new_2d(12, 5);
    let perm = vec![50.0; grid.cells()];
    let boundary = BoundarySpec {
        faces: [Some(1.0), Some(0.0), None, None, None, None],
    };
    let solver = SolverConfig::default();
    let s = solve_darcy_pressure(&perm, &grid, &WellSpec { rate: 0.0 }, &boundary, &solver).unwrap();
    let mut err: f64 = 0.0;
    for i in 0..grid.nx {
        let want = 1.0 - (i as f64 + 0.5) / grid.nx as f64;
        for j in 0..grid.ny {
            err = err.max((s.x[grid.idx(i, j, 0)] - want).abs());
        }
    }
    err
}

/// Source-free random instances whose solution leaves the boundary range.
pub fn maximum_principle_violations(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solver = SolverConfig::default();
    let mut bad = 0;
    for _ in 0..instances {
        let grid = GridSpec::new_2d(rng.random_range(3..9), rng.random_range(3..9));
        let perm = random_perm(&mut rng, grid.cells());
        let mut faces = [None; 6];
        for f in faces.iter_mut().take(4) {
            if rng.random_bool(0.7) {
                *f = Some(rng.random_range(-5.0..5.0));
            }
        }
        if faces.iter().all(Option::is_none) {
            faces[0] = Some(1.0);
        }
        let vals: Vec<f64> = faces.iter().flatten().copied().collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = solve_darcy_pressure(&perm, &grid, &WellSpec { rate: 0.0 }, &BoundarySpec { faces }, &solver).unwrap();
        let tol = 1e-8 * (hi - lo).abs().max(1.0);
        if s.x.iter().any(|p| *p < lo - tol || *p > hi + tol) {
            bad += 1;
        }
    }
    bad
}
