//! Subcommand bodies. Each takes a resolved config and returns the files and
//! stdout text it produces; nothing here touches the file system except for
//! reading declared inputs.

use std::path::PathBuf;

use deltavar_core::baselines::{cost_accounting, dropout_variance, Ensemble, Method, ResampleMode, Workload};
use deltavar_core::bench::{run_scenario, simulate, Clock, Executor, ReportRow, ScenarioSpec, Timing, STATE_DIM};
use deltavar_core::covariance::{CovarianceEstimate, EmaConfig, Repr, Role, SigmaKind};
use deltavar_core::delta_variance::{block_decompose, delta_variance, finetune_scales, FinetuneConfig, FinetuneObjective};
use deltavar_core::models::{train, Model, ModelKind, MlpSpec, TrainConfig};
use deltavar_core::oracles::{
    adversarial_shift, eps_loo_variance, gaussian_posterior_mc, infinitesimal_jackknife, loo_variance,
    mahalanobis_gradient_distance, AdversarialMode, EpsLooPrefactor, OracleKind, OracleReport,
};
use deltavar_core::bench::noisy_block_synthetic;
use deltavar_core::qoi::{Qoi, QoiKind};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{read_csv, DataSource};
use crate::error::{CliError, Result};
use crate::floats::{fmt_f64, json_num};
use crate::model_file::{load_model, ModelFile, ModelSpec};
use crate::report::{metrics_json, plot_tables, pretty, provenance_json, report_csv_string, timing_json};
use crate::sigma_file::{build_sigma, encode, load_sigma};

/// What a command produced.
#[derive(Debug, Default)]
pub struct Output {
    /// Paths relative to the output directory.
    pub files: Vec<(String, Vec<u8>)>,
    pub stdout: String,
}

impl Output {
    fn file(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_owned(), bytes.into()));
    }
}

fn config_value<T: Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch: Option<usize>,
    pub grad_tol: Option<f64>,
    pub polish_steps: Option<usize>,
}

impl TrainSettings {
    pub fn config(&self, kind: &ModelKind, seed: u64) -> TrainConfig {
        let base = TrainConfig::for_model(kind);
        TrainConfig {
            steps: self.steps.unwrap_or(base.steps),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch: self.batch.unwrap_or(base.batch),
            grad_tol: self.grad_tol.unwrap_or(base.grad_tol),
            polish_steps: self.polish_steps.unwrap_or(base.polish_steps),
            seed,
            weights: None,
        }
    }
}

fn default_decay() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    32
}

fn default_sigma() -> String {
    String::from("fisher-diag")
}

/// EMA settings shared by the commands that can build `fisher-ema-diag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaSettings {
    pub decay: f64,
    pub batch: usize,
}

impl Default for EmaSettings {
    fn default() -> Self {
        Self {
            decay: default_decay(),
            batch: default_batch(),
        }
    }
}

impl EmaSettings {
    fn config(&self, seed: u64) -> EmaConfig {
        EmaConfig {
            decay: self.decay,
            batch: self.batch,
            steps: None,
            seed,
        }
    }
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmd {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainSettings,
}

pub fn train_cmd(cfg: &TrainCmd) -> Result<Output> {
    let data = cfg.data.load()?;
    let kind = cfg.model.model_kind()?;
    let d_out = match kind {
        ModelKind::Mlp(_) => data.d_out(),
        _ => 1,
    };
    let fresh = Model::new(kind.clone(), data.d_in(), d_out, cfg.seed)?;
    let (model, report) = train(&fresh, &data, &cfg.train.config(&kind, cfg.seed))?;
    let mut out = Output::default();
    out.file("model.json", pretty(&serde_json::to_value(ModelFile::of(&model)).expect("model serializes")));
    let values = vec![
        (String::from("n_train"), data.len() as f64),
        (String::from("n_params"), model.n_params() as f64),
        (String::from("train.steps"), report.steps as f64),
        (String::from("train.loss"), report.loss),
        (String::from("train.grad_norm"), report.grad_norm),
        (String::from("train.converged"), if report.converged { 1.0 } else { 0.0 }),
    ];
    out.file("provenance.json", pretty(&provenance_json("train", cfg.seed, &config_value(cfg), &values)));
    out.stdout = format!(
        "trained {} with {} parameters: loss {}, gradient norm {}\n",
        model.kind().name(),
        model.n_params(),
        fmt_f64(report.loss),
        fmt_f64(report.grad_norm)
    );
    Ok(out)
}

// ---------------------------------------------------------------- sigma

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaCmd {
    #[serde(default)]
    pub seed: u64,
    pub model: PathBuf,
    pub data: DataSource,
    #[serde(default = "default_sigma")]
    pub kind: String,
    #[serde(default)]
    pub reg: f64,
    #[serde(default)]
    pub ema: EmaSettings,
}

pub fn sigma_cmd(cfg: &SigmaCmd) -> Result<Output> {
    let model = load_model(&cfg.model)?;
    let data = cfg.data.load()?;
    let kind = SigmaKind::parse(&cfg.kind).map_err(|e| CliError::Config(e.to_string()))?;
    let sigma = build_sigma(&model, &data, kind, cfg.reg, &cfg.ema.config(cfg.seed))?;
    let mut out = Output::default();
    out.file("sigma.bin", encode(&sigma)?);
    let values = vec![
        (String::from("reg"), sigma.regularizer),
        (String::from("n_points"), sigma.n_points as f64),
        (String::from("dim"), sigma.dim() as f64),
    ];
    out.file("provenance.json", pretty(&provenance_json("sigma", cfg.seed, &config_value(cfg), &values)));
    out.stdout = format!("{} sigma of dimension {} (reg {})\n", kind.name(), sigma.dim(), fmt_f64(cfg.reg));
    Ok(out)
}

// ---------------------------------------------------------------- deltavar

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltavarCmd {
    #[serde(default)]
    pub seed: u64,
    pub model: PathBuf,
    #[serde(default)]
    pub data: Option<DataSource>,
    /// Σ kind to build from `data`; ignored when `sigma_file` is given.
    #[serde(default)]
    pub sigma: Option<String>,
    #[serde(default)]
    pub sigma_file: Option<PathBuf>,
    pub qoi: String,
    pub inputs: Vec<Vec<f64>>,
    #[serde(default)]
    pub reg: f64,
    #[serde(default)]
    pub ema: EmaSettings,
}

/// Input sets: one set of all inputs for `set-product`, one per input otherwise.
pub fn input_sets(qoi: &Qoi, inputs: &[Vec<f64>]) -> Vec<(String, Vec<Vec<f64>>)> {
    match qoi.kind {
        QoiKind::SetProduct => vec![(String::from("set"), inputs.to_vec())],
        _ => inputs.iter().enumerate().map(|(i, x)| (format!("z{i}"), vec![x.clone()])).collect(),
    }
}

fn load_or_build_sigma(
    model: &Model,
    data: Option<&DataSource>,
    kind: Option<&str>,
    file: Option<&PathBuf>,
    reg: f64,
    ema: &EmaConfig,
) -> Result<CovarianceEstimate> {
    match (file, kind) {
        (Some(_), Some(_)) => Err(CliError::Config(String::from("give either a sigma kind or a sigma file, not both"))),
        (Some(path), None) => load_sigma(path),
        (None, kind) => {
            let kind = SigmaKind::parse(kind.unwrap_or("fisher-diag")).map_err(|e| CliError::Config(e.to_string()))?;
            let data = data.ok_or_else(|| CliError::Config(String::from("building sigma needs training data")))?;
            build_sigma(model, &data.load()?, kind, reg, ema)
        }
    }
}

pub fn deltavar_cmd(cfg: &DeltavarCmd) -> Result<Output> {
    let model = load_model(&cfg.model)?;
    let qoi = Qoi::parse(&cfg.qoi).map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.inputs.is_empty() {
        return Err(CliError::Config(String::from("no inputs given")));
    }
    let sigma = load_or_build_sigma(
        &model,
        cfg.data.as_ref(),
        cfg.sigma.as_deref(),
        cfg.sigma_file.as_ref(),
        cfg.reg,
        &cfg.ema.config(cfg.seed),
    )?;
    let mut rows = Vec::new();
    for (id, z) in input_sets(&qoi, &cfg.inputs) {
        let (_, d) = qoi.value_and_delta(&model, &z)?;
        rows.push(ReportRow {
            input_id: id,
            qoi_id: qoi.id(),
            method: String::from(Method::Delta.name()),
            nu: delta_variance(&d, &sigma)?,
            error: None,
            sigma_kind: Some(sigma.kind),
            reg: Some(sigma.regularizer),
            oracle_kind: None,
        });
    }
    let csv = report_csv_string(&rows)?;
    let mut out = Output::default();
    out.file("report.csv", csv.clone());
    out.file("provenance.json", pretty(&provenance_json("deltavar", cfg.seed, &config_value(cfg), &[])));
    out.stdout = csv;
    Ok(out)
}

// ---------------------------------------------------------------- oracle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleCmd {
    pub seed: u64,
    pub model: PathBuf,
    pub data: Option<DataSource>,
    pub qoi: String,
    pub inputs: Vec<Vec<f64>>,
    /// `posterior-mc`, `loo`, `eps-loo`, `ij`, `adv-offset`, `adv-noise` or `mahalanobis`.
    pub oracle: String,
    /// Σ for the Delta row and the posterior draws.
    pub sigma: String,
    pub reg: f64,
    pub samples: usize,
    pub eps: f64,
    /// Offset δ of the injected point (adv-offset).
    pub offset: f64,
    /// Noise σ and draws (adv-noise).
    pub noise_sigma: f64,
    pub draws: usize,
    /// `proof` (N/ε²) or `definition` ((N−ε)/ε²).
    pub prefactor: String,
    pub train: TrainSettings,
    pub ema: EmaSettings,
}

impl Default for OracleCmd {
    fn default() -> Self {
        Self {
            seed: 0,
            model: PathBuf::new(),
            data: None,
            qoi: String::new(),
            inputs: Vec::new(),
            oracle: String::from("posterior-mc"),
            sigma: String::from("fisher-full"),
            reg: 0.0,
            samples: 100_000,
            eps: 1e-4,
            offset: 1.0,
            noise_sigma: 1.0,
            draws: 1_000,
            prefactor: String::from("proof"),
            train: TrainSettings::default(),
            ema: EmaSettings::default(),
        }
    }
}

fn oracle_json(id: &str, r: &OracleReport) -> Value {
    json!({
        "input_id": id,
        "oracle_kind": r.kind.name(),
        "estimate": json_num(r.estimate),
        "stderr": json_num(r.stderr),
        "samples": r.samples,
        "seed": r.seed,
    })
}

pub fn oracle_cmd(cfg: &OracleCmd) -> Result<Output> {
    let model = load_model(&cfg.model)?;
    let qoi = Qoi::parse(&cfg.qoi).map_err(|e| CliError::Config(e.to_string()))?;
    let kind = OracleKind::parse(&cfg.oracle).map_err(|e| CliError::Config(e.to_string()))?;
    let prefactor = match cfg.prefactor.as_str() {
        "proof" => EpsLooPrefactor::Proof,
        "definition" => EpsLooPrefactor::Definition,
        other => return Err(CliError::Config(format!("prefactor must be proof or definition, got '{other}'"))),
    };
    if cfg.inputs.is_empty() {
        return Err(CliError::Config(String::from("no inputs given")));
    }
    let source = cfg.data.as_ref().ok_or_else(|| CliError::Config(String::from("oracles need training data")))?;
    let data = source.load()?;
    let sigma_kind = SigmaKind::parse(&cfg.sigma).map_err(|e| CliError::Config(e.to_string()))?;
    let sigma = build_sigma(&model, &data, sigma_kind, cfg.reg, &cfg.ema.config(cfg.seed))?;
    let tcfg = cfg.train.config(model.kind(), cfg.seed);
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for (id, z) in input_sets(&qoi, &cfg.inputs) {
        let (_, d) = qoi.value_and_delta(&model, &z)?;
        let nu = delta_variance(&d, &sigma)?;
        let report = match kind {
            OracleKind::PosteriorMc => {
                let cov: DMatrix<f64> = sigma.repr.to_dense();
                let u = |t: &[f64]| qoi.eval::<f64>(&model, t, &z);
                gaussian_posterior_mc(&u, model.theta(), &cov, cfg.samples, cfg.seed)?
            }
            OracleKind::Loo => loo_variance(&model, &data, &qoi, &z, &tcfg)?,
            OracleKind::EpsLoo => eps_loo_variance(&model, &data, &qoi, &z, cfg.eps, prefactor, &tcfg)?,
            OracleKind::InfinitesimalJackknife => infinitesimal_jackknife(&model, &data, &qoi, &z, prefactor, &tcfg)?,
            OracleKind::AdversarialOffset => {
                let mode = AdversarialMode::Offset { delta: cfg.offset };
                adversarial_shift(&model, &data, &qoi, &z, mode, cfg.eps, cfg.seed, &tcfg)?
            }
            OracleKind::AdversarialNoise => {
                let mode = AdversarialMode::Noise {
                    sigma: cfg.noise_sigma,
                    draws: cfg.draws,
                };
                adversarial_shift(&model, &data, &qoi, &z, mode, cfg.eps, cfg.seed, &tcfg)?
            }
            OracleKind::Mahalanobis => {
                let m = mahalanobis_gradient_distance(&model, &data, &qoi, &z)?;
                OracleReport {
                    kind,
                    estimate: m.distance,
                    stderr: 0.0,
                    samples: data.len(),
                    seed: cfg.seed,
                }
            }
        };
        for (method, value, okind) in [(Method::Delta.name(), nu, None), ("oracle", report.estimate, Some(kind))] {
            rows.push(ReportRow {
                input_id: id.clone(),
                qoi_id: qoi.id(),
                method: String::from(method),
                nu: value,
                error: None,
                sigma_kind: Some(sigma.kind),
                reg: Some(sigma.regularizer),
                oracle_kind: okind,
            });
        }
        details.push(oracle_json(&id, &report));
    }
    let csv = report_csv_string(&rows)?;
    let mut out = Output::default();
    out.file("report.csv", csv.clone());
    out.file("oracle.json", pretty(&Value::Array(details)));
    out.file("provenance.json", pretty(&provenance_json("oracle", cfg.seed, &config_value(cfg), &[])));
    out.stdout = csv;
    Ok(out)
}

// ---------------------------------------------------------------- finetune

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSettings {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneCmd {
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub data: Option<DataSource>,
    /// CSV `x0..,y0`: one QoI input per row and its observed value.
    pub validation: Option<PathBuf>,
    pub qoi: Option<String>,
    pub sigma: String,
    pub reg: f64,
    /// `loglik` or `corr`.
    pub objective: String,
    pub steps: usize,
    pub step: f64,
    /// Two-block synthetic with one informative and one noise block.
    pub synthetic: Option<SyntheticSettings>,
    pub ema: EmaSettings,
}

impl Default for FinetuneCmd {
    fn default() -> Self {
        let ft = FinetuneConfig::default();
        Self {
            seed: 0,
            model: None,
            data: None,
            validation: None,
            qoi: None,
            sigma: default_sigma(),
            reg: 0.0,
            objective: String::from("loglik"),
            steps: ft.steps,
            step: ft.step,
            synthetic: None,
            ema: EmaSettings::default(),
        }
    }
}

pub fn finetune_cmd(cfg: &FinetuneCmd) -> Result<Output> {
    let objective = match cfg.objective.as_str() {
        "loglik" => FinetuneObjective::Loglik,
        "corr" => FinetuneObjective::Correlation,
        other => return Err(CliError::Config(format!("objective must be loglik or corr, got '{other}'"))),
    };
    let ft_cfg = FinetuneConfig {
        steps: cfg.steps,
        step: cfg.step,
    };
    let mut out = Output::default();
    let (cached, errors, names, sigma) = match (&cfg.synthetic, &cfg.model) {
        (Some(s), None) => {
            let (cached, errors) = noisy_block_synthetic(s.n, s.seed);
            (cached, errors, vec![String::from("informative"), String::from("noise")], None)
        }
        (None, Some(path)) => {
            let model = load_model(path)?;
            let need = |what: &str| CliError::Config(format!("finetune on a model needs '{what}'"));
            let data = cfg.data.as_ref().ok_or_else(|| need("data"))?.load()?;
            let val = read_csv(cfg.validation.as_ref().ok_or_else(|| need("validation"))?)?;
            let qoi = Qoi::parse(cfg.qoi.as_deref().ok_or_else(|| need("qoi"))?)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let kind = SigmaKind::parse(&cfg.sigma).map_err(|e| CliError::Config(e.to_string()))?;
            let sigma = build_sigma(&model, &data, kind, cfg.reg, &cfg.ema.config(cfg.seed))?;
            let mut cached = Vec::with_capacity(val.len());
            let mut errors = Vec::with_capacity(val.len());
            for i in 0..val.len() {
                let z = vec![val.input(i).to_vec()];
                let (u, d) = qoi.value_and_delta(&model, &z)?;
                cached.push(block_decompose(&d, &sigma)?);
                errors.push(val.target(i)[0] - u);
            }
            let names = sigma.blocks.iter().map(|b| b.name.clone()).collect();
            (cached, errors, names, Some(sigma))
        }
        _ => {
            return Err(CliError::Config(String::from(
                "finetune needs exactly one of 'model' or 'synthetic'",
            )))
        }
    };
    let report = finetune_scales(&cached, &errors, objective, ft_cfg)?;
    let scales = report.scales.scales();
    if let Some(sigma) = sigma {
        out.file("sigma.bin", encode(&sigma.with_block_scales(&scales)?)?);
    }
    let summary = json!({
        "objective": objective.name(),
        "untuned": json_num(report.initial),
        "tuned": json_num(report.final_objective),
        "blocks": names.iter().zip(&scales).map(|(n, s)| json!({"name": n, "scale": json_num(*s)})).collect::<Vec<_>>(),
        "alpha": report.calibration.map_or(Value::Null, |c| json_num(c.alpha)),
        "beta": report.calibration.map_or(Value::Null, |c| json_num(c.beta)),
    });
    out.file("scales.json", pretty(&summary));
    let values = vec![
        (String::from("untuned"), report.initial),
        (String::from("tuned"), report.final_objective),
        (String::from("n_validation"), cached.len() as f64),
    ];
    out.file("provenance.json", pretty(&provenance_json("finetune", cfg.seed, &config_value(cfg), &values)));
    out.stdout = format!(
        "{} objective: untuned {}, tuned {}\n",
        objective.name(),
        fmt_f64(report.initial),
        fmt_f64(report.final_objective)
    );
    Ok(out)
}

// ---------------------------------------------------------------- bench

/// Runs a scenario; `threads` is only recorded in `timing.json`.
pub fn bench_cmd<E: Executor, C: Clock>(spec: &ScenarioSpec, exec: &E, clock: &C, threads: usize) -> Result<Output> {
    let t0 = clock.now();
    let report = run_scenario(spec, exec, clock)?;
    let mut out = Output::default();
    out.file("report.csv", report_csv_string(&report.rows)?);
    out.file("metrics.json", pretty(&metrics_json(&report)));
    out.file(
        "provenance.json",
        pretty(&provenance_json("bench", spec.seed, &config_value(spec), &report.provenance)),
    );
    for (name, text) in plot_tables(&report)? {
        out.file(&format!("plots/{name}"), text);
    }
    let mut timings = report.timings.clone();
    timings.push(Timing {
        label: String::from("total"),
        seconds: clock.now() - t0,
    });
    out.file("timing.json", pretty(&timing_json(threads, &timings)));
    out.stdout = format!("{} scenario: {} report rows\n", report.scenario.name(), report.rows.len());
    Ok(out)
}

// ---------------------------------------------------------------- cost

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostCmd {
    pub seed: u64,
    /// Trained MLP; a fresh residual tanh MLP of `hidden` widths otherwise.
    pub model: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub qoi: String,
    pub members: usize,
    pub passes: usize,
    pub rate: f64,
    pub sigma_diagonal: bool,
    /// Inputs timed per repeat.
    pub inputs: usize,
    pub repeats: usize,
}

impl Default for CostCmd {
    fn default() -> Self {
        Self {
            seed: 0,
            model: None,
            hidden: vec![32, 32],
            qoi: String::from("rollout-pow3-c0-h5"),
            members: 10,
            passes: 10,
            rate: 0.1,
            sigma_diagonal: true,
            inputs: 50,
            repeats: 3,
        }
    }
}

/// Counted costs go to `cost.csv`; measured seconds per query to `timing.json`.
pub fn cost_cmd<C: Clock>(cfg: &CostCmd, clock: &C, threads: usize) -> Result<Output> {
    if cfg.members < 2 || cfg.passes < 2 {
        return Err(CliError::Config(String::from("members and passes must be >= 2")));
    }
    let qoi = Qoi::parse(&cfg.qoi).map_err(|e| CliError::Config(e.to_string()))?;
    let base = match &cfg.model {
        Some(p) => load_model(p)?,
        None => {
            let spec = MlpSpec {
                hidden: cfg.hidden.clone(),
                residual: true,
                ..MlpSpec::default()
            };
            Model::new(ModelKind::Mlp(spec), STATE_DIM, STATE_DIM, cfg.seed)?
        }
    };
    let members: Vec<Model> = (0..cfg.members as u64)
        .map(|k| if k == 0 { Ok(base.clone()) } else { Model::new(base.kind().clone(), base.d_in(), base.d_out(), cfg.seed + k) })
        .collect::<std::result::Result<_, _>>()?;
    let ensemble = Ensemble::new(members, ResampleMode::InitOnly)?;
    let p = base.n_params();
    let sigma = if cfg.sigma_diagonal {
        CovarianceEstimate::identity(p)?
    } else {
        CovarianceEstimate::new(
            SigmaKind::FisherFull,
            Repr::Full(DMatrix::identity(p, p)),
            Role::Covariance,
            1,
            base.params().blocks().to_vec(),
        )?
    };
    let inputs: Vec<Vec<Vec<f64>>> = simulate(cfg.seed, cfg.inputs.max(1), 0, 0.0)
        .into_iter()
        .map(|t| vec![t[0].to_vec()])
        .collect();
    if inputs[0][0].len() != base.d_in() {
        return Err(CliError::Config(format!("cost timing uses {STATE_DIM}-dimensional states; model takes {}", base.d_in())));
    }
    let methods = [
        Method::Delta,
        Method::Dropout { passes: cfg.passes },
        Method::Ensemble { members: cfg.members },
    ];
    let mut best = [f64::INFINITY; 3];
    let mut sink = 0.0;
    for _ in 0..cfg.repeats.max(1) {
        for (m, slot) in best.iter_mut().enumerate() {
            let t0 = clock.now();
            for (i, z) in inputs.iter().enumerate() {
                sink += match m {
                    0 => {
                        let (_, d) = qoi.value_and_delta(&base, z)?;
                        delta_variance(&d, &sigma)?
                    }
                    1 => dropout_variance(&base, &qoi, z, cfg.passes, cfg.rate, cfg.seed ^ i as u64)?,
                    _ => ensemble.variance(&qoi, z)?,
                };
            }
            *slot = slot.min((clock.now() - t0) / inputs.len() as f64);
        }
    }
    if !sink.is_finite() {
        return Err(CliError::Failure(String::from("non-finite variance while timing")));
    }
    let workload = Workload::new(&base, &qoi, &inputs[0], cfg.sigma_diagonal);
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Failure(e.to_string());
    w.write_record([
        "method",
        "train_factor",
        "inference_evaluations",
        "inference_gradients",
        "memory_factor",
        "flops",
    ])
    .map_err(fail)?;
    let mut timings = Vec::new();
    for (m, method) in methods.iter().enumerate() {
        let c = cost_accounting(*method, workload);
        w.write_record([
            c.method.name().to_owned(),
            fmt_f64(c.train_factor),
            c.inference_evaluations.to_string(),
            c.inference_gradients.to_string(),
            fmt_f64(c.memory_factor),
            fmt_f64(c.flops),
        ])
        .map_err(fail)?;
        timings.push(Timing {
            label: format!("inference.{}", method.name()),
            seconds: best[m],
        });
    }
    let table = String::from_utf8(w.into_inner().map_err(|e| CliError::Failure(e.to_string()))?)
        .map_err(|e| CliError::Failure(e.to_string()))?;
    let mut out = Output::default();
    out.file("cost.csv", table.clone());
    out.file("timing.json", pretty(&timing_json(threads, &timings)));
    let values = vec![(String::from("n_params"), p as f64)];
    out.file("provenance.json", pretty(&provenance_json("cost", cfg.seed, &config_value(cfg), &values)));
    out.stdout = table;
    Ok(out)
}
