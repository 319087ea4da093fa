//! `plume`: generate data, run the surrogate pipeline, render reports and plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use plume_core::datagen::{build_dataset, sha256_hex, write_dataset, GeostatConfig, GridSpec, PhysicsConfig};
use plume_core::pipeline::{run_pipeline, Fault, RunConfig};
use plume_core::{report, CoreError, Qoi};

const EXIT_USAGE: u8 = 2;
const EXIT_PIPELINE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "plume", version, about = "Autonomous surrogate building for Darcy and CO2 plume data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReasonerArg {
    Scripted,
    Llm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplerArg {
    Tpe,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Md,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// NXxNY or NXxNYxNZ.
        #[arg(long, default_value = "32x32")]
        grid: String,
        #[arg(long, default_value_t = 8)]
        timesteps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the full pipeline on a dataset.
    Run {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON file mirroring the run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of pressure,saturation.
        #[arg(long)]
        qois: Option<String>,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long, value_enum)]
        reasoner: Option<ReasonerArg>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model_name: Option<String>,
        /// Fail instead of using the scripted reasoner when the endpoint misbehaves.
        #[arg(long)]
        no_fallback: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// nan-round-1, plateau or grad-explosion.
        #[arg(long)]
        inject: Option<String>,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long)]
        max_rounds: Option<u32>,
        #[arg(long)]
        e_extra: Option<u32>,
        #[arg(long)]
        max_switches: Option<u32>,
        #[arg(long)]
        trials: Option<u32>,
        #[arg(long)]
        trial_epochs: Option<u32>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        patience: Option<u32>,
        #[arg(long)]
        max_base_channels: Option<i64>,
        #[arg(long)]
        memory_budget: Option<usize>,
    },
    /// Render the summary of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: FormatArg,
    },
    /// Plot prediction, truth and error for one test sample.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qoi: String,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Negative values count from the last timestep.
        #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
        timestep: i64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Self {
            code: if e.is_usage() { EXIT_USAGE } else { EXIT_PIPELINE },
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(format!("invalid configuration: {e}"))
    }
}

fn parse_grid(s: &str) -> Result<GridSpec, Failure> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("grid `{s}` is not NXxNY or NXxNYxNZ")))?;
    match parts.as_slice() {
        [nx, ny] => Ok(GridSpec::new_2d(*nx, *ny)),
        [nx, ny, nz] => Ok(GridSpec {
            nz: *nz,
            ..GridSpec::new_2d(*nx, *ny)
        }),
        _ => Err(Failure::usage(format!("grid `{s}` is not NXxNY or NXxNYxNZ"))),
    }
}

fn gen_data(samples: usize, grid: &str, timesteps: usize, seed: u64, out: &Path, force: bool) -> Result<(), Failure> {
    let grid = parse_grid(grid)?;
    let non_empty = out.is_dir() && std::fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Failure::usage(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let bundle = build_dataset(samples, &grid, &GeostatConfig::default(), &PhysicsConfig::default(), timesteps, seed)?;
    write_dataset(out, &bundle)?;
    let m = &bundle.manifest;
    let manifest_hash = sha256_hex(&serde_json::to_vec(m)?);
    println!(
        "wrote {}: {} samples, grid {}x{}x{}, {} timesteps, split {}/{}/{}, max residual {:.2e}",
        out.display(),
        m.n_samples,
        m.grid.nx,
        m.grid.ny,
        m.grid.nz,
        m.timesteps,
        m.split.train.len(),
        m.split.val.len(),
        m.split.test.len(),
        m.max_rel_residual
    );
    println!("manifest sha256 {manifest_hash}");
    Ok(())
}

/// Recursively writes `patch` over `base`, recording each leaf key set.
fn overlay(base: &mut Value, patch: &Value, prefix: &str, source: &str, sources: &mut BTreeMap<String, String>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.entry(k.clone()).or_insert(Value::Null);
                if v.is_object() && slot.is_object() {
                    overlay(slot, v, &key, source, sources);
                } else {
                    *slot = v.clone();
                    sources.insert(key, source.into());
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn set(obj: &mut Map<String, Value>, path: &str, v: Value) {
    let mut cur = obj;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("nested config object");
    }
    cur.insert(parts[parts.len() - 1].to_string(), v);
}

fn env_layer() -> Map<String, Value> {
    let mut m = Map::new();
    let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
    if let Some(v) = var("PLUME_REASONER") {
        set(&mut m, "reasoner.backend", json!(v));
    }
    if let Some(v) = var("PLUME_LLM_ENDPOINT") {
        set(&mut m, "reasoner.endpoint", json!(v));
    }
    if let Some(v) = var("PLUME_LLM_MODEL") {
        set(&mut m, "reasoner.model_name", json!(v));
    }
    if let Some(v) = var("PLUME_SEED").and_then(|s| s.parse::<u64>().ok()) {
        set(&mut m, "seed", json!(v));
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn flag_layer(
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    qois: Option<String>,
    instruction: Option<String>,
    reasoner: Option<ReasonerArg>,
    endpoint: Option<String>,
    model_name: Option<String>,
    no_fallback: bool,
    seed: Option<u64>,
    inject: Option<String>,
    sampler: Option<SamplerArg>,
    numbers: [(&str, Option<u64>); 9],
) -> Result<Map<String, Value>, Failure> {
    let mut m = Map::new();
    if let Some(d) = data {
        set(&mut m, "data_dir", json!(d));
    }
    if let Some(o) = out {
        set(&mut m, "out_dir", json!(o));
    }
    if let Some(q) = qois {
        let list: Vec<Qoi> = q
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| Qoi::parse(s).ok_or_else(|| Failure::usage(format!("unknown quantity of interest `{s}`"))))
            .collect::<Result<_, _>>()?;
        set(&mut m, "qois", json!(list));
    }
    if let Some(i) = instruction {
        set(&mut m, "instruction", json!(i));
    }
    if let Some(r) = reasoner {
        set(&mut m, "reasoner.backend", json!(match r {
            ReasonerArg::Scripted => "scripted",
            ReasonerArg::Llm => "llm",
        }));
    }
    if let Some(e) = endpoint {
        set(&mut m, "reasoner.endpoint", json!(e));
    }
    if let Some(n) = model_name {
        set(&mut m, "reasoner.model_name", json!(n));
    }
    if no_fallback {
        set(&mut m, "reasoner.fallback_to_scripted", json!(false));
    }
    if let Some(s) = seed {
        set(&mut m, "seed", json!(s));
    }
    if let Some(f) = inject {
        let fault = Fault::parse(&f)?;
        set(&mut m, "inject", json!(fault));
    }
    if let Some(s) = sampler {
        set(&mut m, "sampler", json!(match s {
            SamplerArg::Tpe => "tpe",
            SamplerArg::Random => "random",
        }));
    }
    for (path, v) in numbers {
        if let Some(v) = v {
            set(&mut m, path, json!(v));
        }
    }
    Ok(m)
}

/// Effective configuration: flags over config file over environment over defaults.
fn resolve_config(config: Option<&Path>, flags: Map<String, Value>) -> Result<(RunConfig, BTreeMap<String, String>), Failure> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    let mut sources = BTreeMap::new();
    overlay(&mut value, &Value::Object(env_layer()), "", "env", &mut sources);
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Failure::usage(format!("config {} must be a JSON object", path.display())));
        }
        overlay(&mut value, &file, "", "config", &mut sources);
    }
    overlay(&mut value, &Value::Object(flags), "", "flag", &mut sources);
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    cfg.reasoner.token = std::env::var("PLUME_LLM_TOKEN").ok().filter(|v| !v.is_empty());
    // Paths are machine-specific; leave them out of the report.
    sources.remove("data_dir");
    sources.remove("out_dir");
    Ok((cfg, sources))
}

fn real_main() -> Result<(), Failure> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            samples,
            grid,
            timesteps,
            seed,
            out,
            force,
        } => gen_data(samples, &grid, timesteps, seed, &out, force),
        Command::Run {
            data,
            out,
            config,
            qois,
            instruction,
            reasoner,
            endpoint,
            model_name,
            no_fallback,
            seed,
            inject,
            sampler,
            max_rounds,
            e_extra,
            max_switches,
            trials,
            trial_epochs,
            epochs,
            patience,
            max_base_channels,
            memory_budget,
        } => {
            let numbers = [
                ("budgets.max_rounds_per_qoi", max_rounds.map(u64::from)),
                ("budgets.e_extra", e_extra.map(u64::from)),
                ("budgets.max_arch_switches", max_switches.map(u64::from)),
                ("hpo.n_trials", trials.map(u64::from)),
                ("hpo.epochs_per_trial", trial_epochs.map(u64::from)),
                ("train_epochs", epochs.map(u64::from)),
                ("patience", patience.map(u64::from)),
                ("max_base_channels", max_base_channels.map(|v| v.max(0) as u64)),
                ("memory_budget_bytes", memory_budget.map(|v| v as u64)),
            ];
            let flags = flag_layer(
                data, out, qois, instruction, reasoner, endpoint, model_name, no_fallback, seed, inject, sampler, numbers,
            )?;
            let (cfg, sources) = resolve_config(config.as_deref(), flags)?;
            if !cfg.data_dir.join("manifest.json").is_file() {
                return Err(Failure::usage(format!(
                    "{} is not a dataset directory (no manifest.json)",
                    cfg.data_dir.display()
                )));
            }
            let rep = run_pipeline(&cfg, sources)?;
            for (q, s) in &rep.qois {
                println!(
                    "{q}: deployed {} (round {}), val R2 {:.4}, test R2 {:.4} RMSE {:.4} RelL2 {:.4}",
                    s.deployed.card,
                    s.deployed.round,
                    s.deployed.val_quality,
                    s.test_metrics.r2,
                    s.test_metrics.rmse,
                    s.test_metrics.rel_l2
                );
            }
            println!("report written to {}", cfg.out_dir.join("report.json").display());
            Ok(())
        }
        Command::Report { run, format } => {
            if !run.is_dir() {
                return Err(Failure::usage(format!("run directory {} does not exist", run.display())));
            }
            let rep = report::load_report(&run)?;
            report::validate(&rep, &run)?;
            match format {
                FormatArg::Md => {
                    let text = report::render_summary(&rep);
                    let path = run.join("report.md");
                    std::fs::write(&path, &text).map_err(|e| Failure::from(CoreError::io(&path, e)))?;
                    print!("{text}");
                }
                FormatArg::Json => println!("{}", report::to_json(&rep)?),
            }
            Ok(())
        }
        Command::Plot {
            run,
            qoi,
            sample,
            timestep,
        } => {
            if !run.is_dir() {
                return Err(Failure::usage(format!("run directory {} does not exist", run.display())));
            }
            let q = Qoi::parse(&qoi).ok_or_else(|| Failure::usage(format!("unknown quantity of interest `{qoi}`")))?;
            let s = report::plot_fields(&run, q, sample, timestep)?;
            println!(
                "wrote {} ({}, range {:.4}..{:.4}, max error {:.4})",
                run.join(&s.image).display(),
                s.unit,
                s.shared_range.0,
                s.shared_range.1,
                s.error_range.1
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
