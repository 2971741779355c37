//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use deltavar_core::bench::ScenarioSpec;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::commands::{
    bench_cmd, cost_cmd, deltavar_cmd, finetune_cmd, oracle_cmd, sigma_cmd, train_cmd, Output,
};
use crate::config::{parse_set, read_config, resolve, set_path};
use crate::error::{CliError, Result};
use crate::exec::{threads_from_env, Pool, WallClock};
use crate::floats::parse_f64;
use crate::outdir::Staging;

#[derive(Debug, Parser)]
#[command(name = "deltavar", version, about = "Delta Variance estimators, oracles and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created atomically.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Dotted-key override, e.g. `--set survival.repeats=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
struct DeltavarFlags {
    /// Trained model file (model.json).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training data CSV, needed to build Σ.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Σ kind to build from the data.
    #[arg(long)]
    sigma: Option<String>,
    /// Precomputed Σ (sigma.bin).
    #[arg(long)]
    sigma_file: Option<PathBuf>,
    /// QoI id: `powerP`, `set-product`, `rollout-powP-cC-hH`, `rollout-mean-hH`, `rollout-max-cC-hH`
    #[arg(long)]
    qoi: Option<String>,
    /// Comma-separated input vector. Repeatable.
    #[arg(long = "input")]
    inputs: Vec<String>,
    /// Ridge added to the curvature before inversion
    #[arg(long)]
    reg: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to data.
    Train(Common),
    /// Estimate Σ for a trained model.
    Sigma(Common),
    /// Predict the Delta Variance of a QoI.
    Deltavar {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DeltavarFlags,
    },
    /// Compare the Delta Variance with one of the validation oracles.
    Oracle(Common),
    /// Learn per-block Σ scales on validation errors.
    Finetune(Common),
    /// Run a benchmark scenario.
    Bench(Common),
    /// Counted and measured inference cost of Delta, dropout and ensembles.
    Cost(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Sigma(_) => "sigma",
            Command::Deltavar { .. } => "deltavar",
            Command::Oracle(_) => "oracle",
            Command::Finetune(_) => "finetune",
            Command::Bench(_) => "bench",
            Command::Cost(_) => "cost",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::Sigma(c)
            | Command::Oracle(c)
            | Command::Finetune(c)
            | Command::Bench(c)
            | Command::Cost(c) => c,
            Command::Deltavar { common, .. } => common,
        }
    }
}

fn parse_input(s: &str) -> Result<Value> {
    let xs = s
        .split(',')
        .map(|t| parse_f64(t.trim()).ok_or_else(|| CliError::Config(format!("bad --input '{s}'"))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(json!(xs))
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Config file, then flags, then `--set` overrides.
fn merged_config(cmd: &Command) -> Result<Value> {
    let common = cmd.common();
    let mut cfg = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        set_path(&mut cfg, "seed", json!(seed))?;
    }
    if let Command::Deltavar { flags, .. } = cmd {
        if let Some(p) = &flags.model {
            set_path(&mut cfg, "model", path_value(p))?;
        }
        if let Some(p) = &flags.data {
            set_path(&mut cfg, "data", json!({ "csv": path_value(p) }))?;
        }
        if let Some(s) = &flags.sigma {
            set_path(&mut cfg, "sigma", json!(s))?;
        }
        if let Some(p) = &flags.sigma_file {
            set_path(&mut cfg, "sigma_file", path_value(p))?;
        }
        if let Some(q) = &flags.qoi {
            set_path(&mut cfg, "qoi", json!(q))?;
        }
        if !flags.inputs.is_empty() {
            let xs = flags.inputs.iter().map(|s| parse_input(s)).collect::<Result<Vec<_>>>()?;
            set_path(&mut cfg, "inputs", Value::Array(xs))?;
        }
        if let Some(r) = flags.reg {
            set_path(&mut cfg, "reg", json!(r))?;
        }
    }
    for arg in &common.set {
        let (k, v) = parse_set(arg)?;
        set_path(&mut cfg, &k, v)?;
    }
    Ok(cfg)
}

fn typed<T: DeserializeOwned>(cmd: &Command) -> Result<T> {
    resolve(merged_config(cmd)?)
}

fn run(cmd: &Command) -> Result<Output> {
    match cmd {
        Command::Train(_) => train_cmd(&typed(cmd)?),
        Command::Sigma(_) => sigma_cmd(&typed(cmd)?),
        Command::Deltavar { .. } => deltavar_cmd(&typed(cmd)?),
        Command::Oracle(_) => oracle_cmd(&typed(cmd)?),
        Command::Finetune(_) => finetune_cmd(&typed(cmd)?),
        Command::Bench(_) => {
            let spec: ScenarioSpec = typed(cmd)?;
            let pool = Pool::from_env()?;
            bench_cmd(&spec, &pool, &WallClock::default(), pool.threads())
        }
        Command::Cost(_) => cost_cmd(&typed(cmd)?, &WallClock::default(), threads_from_env()?),
    }
}

/// Where files go. `deltavar` and `oracle` only print unless `--out` is given;
/// the others default to `runs/<command>-<seed>`.
fn out_dir(cmd: &Command) -> Result<Option<PathBuf>> {
    let common = cmd.common();
    if let Some(p) = &common.out {
        return Ok(Some(p.clone()));
    }
    if matches!(cmd, Command::Deltavar { .. } | Command::Oracle(_)) {
        return Ok(None);
    }
    let seed = merged_config(cmd)?.get("seed").and_then(Value::as_u64).unwrap_or(0);
    Ok(Some(PathBuf::from(format!("runs/{}-{seed}", cmd.name()))))
}

fn execute(cmd: &Command) -> Result<()> {
    // Resolve everything that can fail cheaply before touching the disk.
    let _ = merged_config(cmd)?;
    let target = out_dir(cmd)?;
    let staging = match &target {
        Some(t) => Some(Staging::new(t, cmd.common().force)?),
        None => None,
    };
    let output = run(cmd)?;
    if let Some(staging) = staging {
        for (rel, bytes) in &output.files {
            staging.write(rel, bytes)?;
        }
        staging.commit()?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(output.stdout.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::Failure(format!("stdout: {e}")))?;
    Ok(())
}

fn error_kind(e: &CliError) -> &'static str {
    match e {
        CliError::Config(_) => "config",
        CliError::Io { .. } => "io",
        CliError::Core(_) => "numerical",
        CliError::Failure(_) => "failure",
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 1 on a handled failure, 2 on a usage or config error.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let line = json!({
                "error": error_kind(&e),
                "command": cli.command.name(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            e.exit_code()
        }
    }
}
