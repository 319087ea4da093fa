//! Runs every acceptance criterion and prints one line per criterion.
//! Exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{gradient_check, CheckLoss};
use plume_core::context::{strip_wall_time, SharedContext};
use plume_core::control::{DiagnosisState, RowKind};
use plume_core::hpo::{Assignment, Value, BASE_CHANNELS};
use plume_core::profiling::{denormalize_pressure, normalize_pressure, PressureNormalization, NORM_EPSILON, PRESSURE_SCALE};
use plume_core::report::{self, Report};
use plume_core::training::{pressure_loss, saturation_loss};
use plume_core::zoo::{estimate_memory, Family};
use plume_core::Qoi;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn plume(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_plume"))
        .args(args)
        .env_remove("PLUME_REASONER")
        .env_remove("PLUME_LLM_ENDPOINT")
        .env_remove("PLUME_SEED")
        .output()
        .map_err(|e| format!("cannot spawn plume: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`plume {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

struct Desk {
    root: tempfile::TempDir,
    data: PathBuf,
}

impl Desk {
    fn new() -> Result<Self, String> {
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = root.path().join("data");
        plume(&[
            "gen-data", "--samples", "200", "--grid", "32x32", "--timesteps", "8", "--seed", "7", "--out", path(&data),
        ])?;
        Ok(Self { root, data })
    }

    fn run(&self, name: &str, extra: &[&str]) -> Result<(PathBuf, Duration), String> {
        let out = self.root.path().join(name);
        let mut args = vec!["run", "--data", path(&self.data), "--out", path(&out), "--reasoner", "scripted", "--seed", "7"];
        args.extend_from_slice(extra);
        let t = Instant::now();
        plume(&args)?;
        Ok((out, t.elapsed()))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn load(run: &Path) -> Result<(Report, SharedContext), String> {
    let rep = report::load_report(run).map_err(|e| e.to_string())?;
    report::validate(&rep, run).map_err(|e| format!("report invalid: {e}"))?;
    let ctx = SharedContext::load(run).map_err(|e| e.to_string())?;
    Ok((rep, ctx))
}

fn crit1() -> Outcome {
    let (v, _) = saturation_loss(&[0.0], &[0.5], 0.01, 1e-4).map_err(|e| e.to_string())?;
    let err = (v - 0.01 * std::f64::consts::LN_2).abs();
    check(err <= 1e-12, format!("saturation loss off by {err:.3e}"))?;
    let p = |a: &[f64], b: &[f64]| pressure_loss(a, b).map(|r| r.0).map_err(|e| e.to_string());
    check(p(&[0.3, -1.2], &[0.3, -1.2])? == 0.0, "identity case not zero")?;
    check(p(&[0.0, 0.0], &[1.0, 1.0])? == 1.0, "unit offset case")?;
    check(p(&[1.0, 3.0], &[0.0, 0.0])? == 5.0, "mean square arithmetic case")?;
    Ok(format!("|L - 0.01 ln2| = {err:.1e}; pressure cases exact"))
}

fn crit2() -> Outcome {
    let cfg = PressureNormalization {
        scale_divisor: PRESSURE_SCALE,
        mu_p: 208.14,
        sigma_p: 6.01,
        epsilon: NORM_EPSILON,
    };
    let z = normalize_pressure(2.0814e7, &cfg).abs();
    check(z <= 1e-12, format!("normalize(datum) = {z:.3e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p: f64 = rng.random_range(1.5e7..3.0e7);
        worst = worst.max(((denormalize_pressure(normalize_pressure(p, &cfg), &cfg) - p) / p).abs());
    }
    check(worst <= 1e-9, format!("round trip rel err {worst:.3e}"))?;
    Ok(format!("normalize(datum) = {z:.1e}; worst round trip {worst:.1e}"))
}

fn crit3() -> Outcome {
    let mut worst = (0.0, "");
    for family in Family::ALL {
        for kind in [CheckLoss::Pressure, CheckLoss::Saturation] {
            let err = gradient_check(family, kind, 12, 3);
            check(err <= 1e-3, format!("{family} {kind:?}: rel err {err:.3e}"))?;
            if err > worst.0 {
                worst = (err, family.as_str());
            }
        }
    }
    Ok(format!("8 families x 2 losses, worst rel err {:.1e} ({})", worst.0, worst.1))
}

fn crit4() -> Outcome {
    let o = common::darcy_dense_oracle();
    check(o.matrix_rel_err <= 1e-12, format!("operator mismatch {:.3e}", o.matrix_rel_err))?;
    check(o.solution_max_abs <= 1e-10, format!("max abs diff {:.3e}", o.solution_max_abs))?;
    let lin = common::linear_profile_error();
    check(lin <= 1e-9, format!("homogeneous profile off by {lin:.3e}"))?;
    let bad = common::maximum_principle_violations(100, 99);
    check(bad == 0, format!("{bad} of 100 instances violate the maximum principle"))?;
    Ok(format!(
        "LU max abs {:.1e} (scale {:.2}); linear {:.1e}; 100/100 bounded",
        o.solution_max_abs, o.scale, lin
    ))
}

fn crit5() -> Outcome {
    let (checked, bad) = common::pruner_enumeration();
    check(checked > 0 && bad == 0, format!("{bad} mismatches in {checked} cases"))?;
    Ok(format!("{checked} configurations, 0 mismatches"))
}

fn crit6() -> Outcome {
    let (tpe, rnd) = common::tpe_vs_random(0);
    if tpe <= rnd {
        return Ok(format!("median best TPE {tpe:.4} <= random {rnd:.4}"));
    }
    let (tpe2, rnd2) = common::tpe_vs_random(10_000);
    check(tpe2 <= rnd2, format!("TPE {tpe:.4} > random {rnd:.4}, rerun {tpe2:.4} > {rnd2:.4}"))?;
    Ok(format!("first seeds lost ({tpe:.4} > {rnd:.4}); fresh seeds TPE {tpe2:.4} <= random {rnd2:.4}"))
}

fn crit12() -> Outcome {
    let bc = |v: i64| {
        let mut hp = Assignment::new();
        hp.insert(BASE_CHANNELS.into(), Value::Int(v));
        hp
    };
    let n = estimate_memory(Family::ResUNet, &bc(16), [80, 80, 20], 31, 1, usize::MAX).param_count;
    let rel = (n as f64 - 4.6e6).abs() / 4.6e6;
    check(rel <= 0.25, format!("ResUNet 3-D has {n} parameters ({:.0}% off)", rel * 100.0))?;
    for family in Family::ALL {
        let counts: Vec<usize> = [8, 16, 32]
            .iter()
            .map(|&b| estimate_memory(family, &bc(b), [32, 32, 1], 8, 1, usize::MAX).param_count)
            .collect();
        check(counts.windows(2).all(|w| w[0] < w[1]), format!("{family} not monotone: {counts:?}"))?;
    }
    Ok(format!("ResUNet 3-D bc16: {n} params ({:+.1}%); monotone for all 8", (n as f64 / 4.6e6 - 1.0) * 100.0))
}

fn crit7(desk: &Desk) -> Result<(String, PathBuf, Duration), String> {
    let (run, t) = desk.run("desk", &[])?;
    let (rep, _) = load(&run)?;
    plume(&["report", "--run", path(&run)])?;
    let p = rep.qois.get(&Qoi::Pressure).ok_or("no pressure section")?.test_metrics;
    let s = rep.qois.get(&Qoi::Saturation).ok_or("no saturation section")?.test_metrics;
    let msg = format!(
        "test R2 pressure {:.4}, saturation {:.4}; {:.1} min on {} CPU",
        p.r2,
        s.r2,
        t.as_secs_f64() / 60.0,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    check(p.r2 >= 0.80, format!("pressure R2 {:.4} < 0.80", p.r2))?;
    check(s.r2 >= 0.50, format!("saturation R2 {:.4} < 0.50", s.r2))?;
    check(t <= Duration::from_secs(30 * 60), format!("took {:.1} min", t.as_secs_f64() / 60.0))?;
    Ok((msg, run, t))
}

fn crit8(desk: &Desk) -> Outcome {
    let (run, t) = desk.run(
        "nan",
        &["--qois", "pressure", "--inject", "nan-round-1", "--instruction", "make pressure R2 higher than 0.8"],
    )?;
    let (rep, ctx) = load(&run)?;
    let unstable = ctx.audit.iter().any(|e| {
        e.action == "diagnose" && e.detail.get("state").and_then(|s| s.as_str()) == Some("unstable")
    });
    check(unstable, "no unstable diagnosis audited")?;
    let restart = ctx
        .audit
        .iter()
        .find(|e| e.action == "stability_restart")
        .ok_or("no stability restart audited")?;
    let lr = restart.detail["lr_cap"].as_f64();
    let clip = restart.detail["grad_clip"].as_f64();
    check(lr == Some(5e-4) && clip == Some(0.25), format!("restart detail {}", restart.detail))?;
    let sec = &rep.qois[&Qoi::Pressure];
    let diag_states: Vec<DiagnosisState> = ctx
        .audit
        .iter()
        .filter(|e| e.action == "diagnose")
        .filter_map(|e| serde_json::from_value(e.detail["state"].clone()).ok())
        .collect();
    check(
        sec.deployed.val_quality == sec.global_best.quality && sec.deployed.checkpoint_ref == sec.global_best.checkpoint_ref,
        format!("deployed {} vs global best {}", sec.deployed.val_quality, sec.global_best.quality),
    )?;
    check(t <= Duration::from_secs(35 * 60), format!("took {:.1} min", t.as_secs_f64() / 60.0))?;
    Ok(format!(
        "diagnoses {diag_states:?}; restart lr<=5e-4 clip 0.25; deployed = global best {:.4}",
        sec.global_best.quality
    ))
}

fn crit9(desk: &Desk) -> Outcome {
    let (run, t) = desk.run(
        "plateau",
        &["--qois", "saturation", "--inject", "plateau", "--instruction", "make saturation R2 higher than 0.3"],
    )?;
    let (rep, _) = load(&run)?;
    let kinds: Vec<RowKind> = rep.qois[&Qoi::Saturation].timeline.iter().map(|r| r.kind).collect();
    let want = [RowKind::Initial, RowKind::Continuation, RowKind::Switch, RowKind::Retrain];
    check(kinds == want, format!("timeline {kinds:?}"))?;
    check(t <= Duration::from_secs(35 * 60), format!("took {:.1} min", t.as_secs_f64() / 60.0))?;
    let cards: Vec<String> = rep.qois[&Qoi::Saturation].timeline.iter().map(|r| r.card.to_string()).collect();
    Ok(format!("timeline {kinds:?} over {cards:?}"))
}

fn crit10(desk: &Desk) -> Outcome {
    let (run, t) = desk.run(
        "maximize",
        &["--qois", "pressure", "--max-rounds", "3", "--instruction", "make R2 as high as possible"],
    )?;
    let (rep, ctx) = load(&run)?;
    let sec = &rep.qois[&Qoi::Pressure];
    let evaluated: Vec<f64> = sec.trainings.iter().filter_map(|t| t.val_metrics.map(|m| m.r2)).collect();
    let best = evaluated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check(!evaluated.is_empty(), "no evaluated checkpoint")?;
    check(sec.deployed.val_quality == best, format!("deployed {} but best evaluated {best}", sec.deployed.val_quality))?;
    let audited = ctx.audit.iter().any(|e| {
        e.action == "deploy" && e.detail.get("val_r2").and_then(|v| v.as_f64()) == Some(best)
    });
    check(audited, "deployment not audited with its quality")?;
    check(t <= Duration::from_secs(30 * 60), format!("took {:.1} min", t.as_secs_f64() / 60.0))?;
    Ok(format!("deployed val R2 {best:.6} = max over {} evaluations {evaluated:.4?}", evaluated.len()))
}

fn crit11(desk: &Desk, first: &Path, first_time: Duration) -> Outcome {
    let (second, t) = desk.run("desk-again", &[])?;
    let read = |p: &Path| -> Result<serde_json::Value, String> {
        let bytes = std::fs::read(p.join("report.json")).map_err(|e| e.to_string())?;
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        strip_wall_time(&mut v);
        Ok(v)
    };
    let a = serde_json::to_vec(&read(first)?).map_err(|e| e.to_string())?;
    let b = serde_json::to_vec(&read(&second)?).map_err(|e| e.to_string())?;
    check(a == b, "report.json differs between identical runs")?;
    check(t <= first_time * 2, format!("second run took {:.1} min", t.as_secs_f64() / 60.0))?;
    Ok(format!("{} bytes identical after stripping wall times", a.len()))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: u32, started: Instant, r: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {n}: PASS {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL {msg} [{secs:.1}s]");
            }
        }
    };
    let quick: [(u32, fn() -> Outcome); 7] =
        [(1, crit1), (2, crit2), (3, crit3), (4, crit4), (5, crit5), (6, crit6), (12, crit12)];
    for (n, f) in quick {
        let t = Instant::now();
        report(n, t, f());
    }

    let t = Instant::now();
    match Desk::new() {
        Ok(desk) => {
            let t7 = Instant::now();
            let first = match crit7(&desk) {
                Ok((msg, run, took)) => {
                    report(7, t7, Ok(msg));
                    Some((run, took))
                }
                Err(e) => {
                    report(7, t7, Err(e));
                    None
                }
            };
            let runs: [(u32, fn(&Desk) -> Outcome); 3] = [(8, crit8), (9, crit9), (10, crit10)];
            for (n, f) in runs {
                let t = Instant::now();
                report(n, t, f(&desk));
            }
            let t = Instant::now();
            match first {
                Some((run, took)) => report(11, t, crit11(&desk, &run, took)),
                None => report(11, t, Err("no baseline run from criterion 7".into())),
            }
        }
        Err(e) => {
            for n in 7..=11 {
                report(n, t, Err(format!("dataset generation failed: {e}")));
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 12 criteria failed");
        ExitCode::FAILURE
    }
}
