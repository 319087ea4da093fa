use std::path::Path;
use std::process::{Command, Output};

fn plume(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plume"))
        .args(args)
        .env_remove("PLUME_REASONER")
        .env_remove("PLUME_LLM_ENDPOINT")
        .env_remove("PLUME_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, seed: &str) -> Output {
    plume(&["gen-data", "--samples", "20", "--grid", "8x8", "--timesteps", "2", "--seed", seed, "--out", dir.to_str().unwrap()])
}

fn tiny_run(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3", "--max-rounds", "1",
        "--trials", "2", "--trial-epochs", "1", "--epochs", "2", "--patience", "1", "--max-base-channels", "8",
    ];
    args.extend_from_slice(extra);
    plume(&args)
}

#[test]
fn gen_data_is_deterministic_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let oa = gen(&a, "4");
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(gen(&b, "4").status.success());
    for f in ["manifest.json", "inputs.f32", "pressure.f32", "saturation.f32"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(stdout(&oa).contains("split 14/2/4"));

    let again = gen(&a, "4");
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = plume(&[
        "gen-data", "--samples", "20", "--grid", "8x8", "--timesteps", "2", "--out", a.to_str().unwrap(), "--force",
    ]);
    assert!(forced.status.success());

    let few = plume(&["gen-data", "--samples", "5", "--out", tmp.path().join("c").to_str().unwrap()]);
    assert_eq!(few.status.code(), Some(2));
    let grid = plume(&["gen-data", "--grid", "8by8", "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(grid.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(plume(&["report", "--run", "/nonexistent/run"]).status.code(), Some(2));
    assert_eq!(plume(&["plot", "--run", "/nonexistent/run", "--qoi", "pressure"]).status.code(), Some(2));
    let no_data = tiny_run(&tmp.path().join("nothing"), &tmp.path().join("out"), &[]);
    assert_eq!(no_data.status.code(), Some(2));
    let data = tmp.path().join("data");
    assert!(gen(&data, "1").status.success());
    let bad = tiny_run(&data, &tmp.path().join("out"), &["--inject", "meteor"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = tiny_run(&data, &tmp.path().join("out"), &["--qois", "pressure,pressure"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = tiny_run(&data, &tmp.path().join("out"), &["--reasoner", "llm"]);
    assert_eq!(bad.status.code(), Some(2), "llm without endpoint");
}

#[test]
fn run_report_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(gen(&data, "2").status.success());
    let o = tiny_run(&data, &run, &["--qois", "pressure", "--instruction", "make R2 higher than 0.9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("pressure: deployed"));
    for f in ["report.json", "report.md", "context.json", "audit.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let md = plume(&["report", "--run", run.to_str().unwrap(), "--format", "md"]);
    assert!(md.status.success());
    let text = stdout(&md);
    assert!(text.contains("## pressure"));
    assert!(!text.contains("## saturation"));
    assert!(text.contains("Target: R2 > 0.9."));
    assert!(text.contains("Instruction: \"make R2 higher than 0.9\""));

    let js = plume(&["report", "--run", run.to_str().unwrap(), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&js)).unwrap();
    assert_eq!(v["schema"], "plume.report/v1");
    assert_eq!(v["environment"]["config_sources"]["instruction"], "flag");

    let p = plume(&["plot", "--run", run.to_str().unwrap(), "--qoi", "pressure", "--sample", "1"]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert!(stdout(&p).contains("P [bar]"));
    assert!(run.join("plots").join("pressure-sample1-t1.png").is_file());
    let far = plume(&["plot", "--run", run.to_str().unwrap(), "--qoi", "pressure", "--sample", "50"]);
    assert_eq!(far.status.code(), Some(2));
    let other = plume(&["plot", "--run", run.to_str().unwrap(), "--qoi", "saturation"]);
    assert_eq!(other.status.code(), Some(2));
}

#[test]
fn config_file_is_layered_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(gen(&data, "2").status.success());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"qois": ["saturation"], "seed": 11, "sampler": "random"}"#).unwrap();
    let o = tiny_run(&data, &run, &["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let src = &v["environment"]["config_sources"];
    assert_eq!(src["qois"], "config");
    assert_eq!(src["sampler"], "config");
    assert_eq!(src["seed"], "flag");
    assert_eq!(v["environment"]["seed"], 3);
    assert!(v["qois"].get("saturation").is_some() && v["qois"].get("pressure").is_none());
    std::fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(tiny_run(&data, &run, &["--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}
