use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    derive_seed, Clock, CostQualityPoint, Executor, FinetunePoint, MetricSummary, ReportRow, RetentionPoint,
    ScenarioKind, ScenarioReport, Timing,
};
use crate::baselines::{
    cost_accounting, dropout_variance, train_member, Ensemble, EnsembleConfig, Method, ResampleMode, Workload,
    DROPOUT_RATES,
};
use crate::covariance::{
    ema_diag_fisher, empirical_fisher, select_regularizer, to_covariance, CovarianceEstimate, EmaConfig, FisherMode,
    SigmaKind, REGULARIZER_GRID,
};
use crate::delta_variance::{block_decompose, delta_variance, finetune_scales, FinetuneConfig, FinetuneObjective};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{
    bootstrap_stderr, error_correlation, fit_calibration, improvement_vs_ensemble, laplace_loglik, mean_and_stderr,
    retention_auc, retention_curve, AscentConfig, LaplaceCalibration, Metric,
};
use crate::models::{Activation, Dataset, MlpSpec, Model, ModelKind, TrainConfig};
use crate::qoi::{apply_functional, Qoi, QoiKind};

pub const STATE_DIM: usize = 3;

const DT: f64 = 0.1;
const MU: f64 = 0.5;
const KAPPA: f64 = 0.3;
const LAMBDA: f64 = 0.5;

/// One step of the true system, a self-excited damped oscillator `(q, p)`
/// coupled quadratically to a relaxing state `s` (semi-implicit Euler):
///
/// `p' = p + dt(−q + μ(1 − q²)p − κqs)`, `q' = q + dt·p'`, `s' = s + dt(−λs + q'²)`.
pub fn true_step(x: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    let [q, p, s] = *x;
    let p1 = p + DT * (-q + MU * (1.0 - q * q) * p - KAPPA * q * s);
    let q1 = q + DT * p1;
    let s1 = s + DT * (-LAMBDA * s + q1 * q1);
    [q1, p1, s1]
}

/// Observed states `x₀..x_len` of one trajectory.
pub type Trajectory = Vec<[f64; STATE_DIM]>;

/// `count` trajectories of `len` transitions from initial states drawn
/// uniformly from `[−2, 2]² × [0, 3]`, each observed with Gaussian noise of
/// standard deviation `noise`.
pub fn simulate(seed: u64, count: usize, len: usize, noise: f64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0)];
            let mut out = Vec::with_capacity(len + 1);
            for step in 0..=len {
                if step > 0 {
                    x = true_step(&x);
                }
                let mut obs = x;
                if noise > 0.0 {
                    for v in &mut obs {
                        *v += noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                out.push(obs);
            }
            out
        })
        .collect()
}

/// `(x_t → x_{t+1})` pairs of every trajectory, in order.
pub fn pairs(trajectories: &[Trajectory]) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for traj in trajectories {
        for w in traj.windows(2) {
            inputs.extend_from_slice(&w[0]);
            targets.extend_from_slice(&w[1]);
        }
    }
    Dataset::from_flat(STATE_DIM, STATE_DIM, inputs, targets)
}

const GEN_LEN: usize = 50;

/// `n` transition pairs from trajectories of 50 steps.
pub fn gen_dynamics(seed: u64, n: usize, noise: f64) -> Result<Dataset> {
    if n < 100 {
        return Err(invalid!("gen_dynamics needs n >= 100, got {n}"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid!("noise must be finite and >= 0"));
    }
    let trajs = simulate(seed, n.div_ceil(GEN_LEN), GEN_LEN, noise);
    let all = pairs(&trajs)?;
    Ok(all.subset(&(0..n).collect::<Vec<_>>()))
}

/// Train / validation / evaluation trajectories, split by trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsSplit {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub evaluation: Vec<Trajectory>,
}

impl DynamicsSplit {
    /// 70/15/15 by trajectory count; validation and evaluation get at least one each.
    pub fn new(mut trajectories: Vec<Trajectory>) -> Result<Self> {
        let n = trajectories.len();
        if n < 3 {
            return Err(invalid!("need at least 3 trajectories to split, got {n}"));
        }
        let held = (libm::round(n as f64 * 0.15) as usize).max(1);
        let evaluation = trajectories.split_off(n - held);
        let validation = trajectories.split_off(n - 2 * held);
        Ok(Self {
            train: trajectories,
            validation,
            evaluation,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DynamicsConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub noise: f64,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub polish_steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub members: usize,
    pub passes: usize,
    /// QoI ids; empty selects [`dynamics_qois`] up to `max_horizon`.
    pub qois: Vec<String>,
    pub max_horizon: usize,
    /// `fisher-ema-diag` or `fisher-diag`.
    pub sigma: String,
    pub ema_decay: f64,
    pub resamples: usize,
    pub finetune_steps: usize,
    /// Evaluation inputs used for the inference timing probe.
    pub timing_inputs: usize,
    pub timing_repeats: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            trajectories: 40,
            steps: 50,
            noise: 0.01,
            hidden: vec![32, 32],
            train_steps: 4_000,
            polish_steps: 300,
            learning_rate: 1e-3,
            batch: 32,
            members: 10,
            passes: 10,
            qois: Vec::new(),
            max_horizon: 5,
            sigma: String::from("fisher-ema-diag"),
            ema_decay: 1e-3,
            resamples: 200,
            finetune_steps: 500,
            timing_inputs: 40,
            timing_repeats: 3,
        }
    }
}

/// `{third power of q, mean state, running max of s} × horizons 1..=max_horizon`.
pub fn dynamics_qois(max_horizon: usize) -> Vec<Qoi> {
    let mut out = Vec::with_capacity(3 * max_horizon);
    for id in ["rollout-pow3-c0", "rollout-mean", "rollout-max-c2"] {
        for h in 1..=max_horizon {
            out.push(Qoi::parse(&format!("{id}-h{h}")).expect("valid built-in id"));
        }
    }
    out
}

/// Starting points `(trajectory, t)` that leave room for `horizon` steps.
fn starts(trajs: &[Trajectory], horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (j, traj) in trajs.iter().enumerate() {
        for t in 0..traj.len().saturating_sub(horizon) {
            out.push((j, t));
        }
    }
    out
}

fn target(qoi: &Qoi, traj: &Trajectory, t: usize) -> f64 {
    let QoiKind::Rollout { horizon, functional } = qoi.kind else {
        unreachable!("dynamics QoIs are rollouts")
    };
    let states: Vec<Vec<f64>> = traj[t + 1..=t + horizon].iter().map(|s| s.to_vec()).collect();
    apply_functional(functional, &states)
}

struct Side {
    inputs: Vec<Vec<Vec<f64>>>,
    deltas: Vec<Vec<f64>>,
    /// Signed errors `y − u`.
    errors: Vec<f64>,
}

impl Side {
    fn new(model: &Model, qoi: &Qoi, trajs: &[Trajectory], at: &[(usize, usize)]) -> Result<Self> {
        let mut side = Side {
            inputs: Vec::with_capacity(at.len()),
            deltas: Vec::with_capacity(at.len()),
            errors: Vec::with_capacity(at.len()),
        };
        for &(j, t) in at {
            let z = vec![trajs[j][t].to_vec()];
            let (u, d) = qoi.value_and_delta(model, &z)?;
            side.errors.push(target(qoi, &trajs[j], t) - u);
            side.deltas.push(d);
            side.inputs.push(z);
        }
        Ok(side)
    }

    fn abs_errors(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.abs()).collect()
    }

    fn delta_nu(&self, sigma: &CovarianceEstimate) -> Result<Vec<f64>> {
        self.deltas.iter().map(|d| delta_variance(d, sigma)).collect()
    }
}

fn calibrated_loglik(errors: &[f64], nu: &[f64]) -> Result<f64> {
    let calib = fit_calibration(errors, nu, AscentConfig::default())?;
    laplace_loglik(errors, nu, calib)
}

struct Scores {
    values: [f64; 3],
    stderr: [f64; 3],
    calib: LaplaceCalibration,
}

fn score(metric: Metric, abs: &[f64], nu: &[f64], calib: LaplaceCalibration) -> Result<f64> {
    match metric {
        Metric::Auc => retention_auc(abs, nu),
        Metric::Correlation => {
            let sd: Vec<f64> = nu.iter().map(|v| libm::sqrt(v.max(0.0))).collect();
            error_correlation(abs, &sd)
        }
        Metric::Loglik => laplace_loglik(abs, nu, calib),
    }
}

fn scores(val: &Side, val_nu: &[f64], eval_abs: &[f64], eval_nu: &[f64], resamples: usize, seed: u64) -> Scores {
    let calib = fit_calibration(&val.abs_errors(), val_nu, AscentConfig::default())
        .unwrap_or_else(|_| LaplaceCalibration::homoscedastic(&val.abs_errors()));
    let mut values = [f64::NAN; 3];
    let mut stderr = [f64::NAN; 3];
    for (m, metric) in Metric::ALL.into_iter().enumerate() {
        values[m] = score(metric, eval_abs, eval_nu, calib).unwrap_or(f64::NAN);
        let stat = |idx: &[usize]| {
            let a: Vec<f64> = idx.iter().map(|&i| eval_abs[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| eval_nu[i]).collect();
            score(metric, &a, &v, calib)
        };
        stderr[m] = bootstrap_stderr(eval_abs.len(), resamples, seed, &stat).unwrap_or(f64::NAN);
    }
    Scores { values, stderr, calib }
}

struct QoiOutcome {
    rows: Vec<ReportRow>,
    metrics: Vec<MetricSummary>,
    retention: Vec<RetentionPoint>,
    finetune: FinetunePoint,
    reg: f64,
    rate: f64,
    flops: Vec<(Method, f64)>,
    sigma: CovarianceEstimate,
}

struct Shared<'a> {
    cfg: &'a DynamicsConfig,
    seed: u64,
    split: &'a DynamicsSplit,
    ensemble: &'a Ensemble,
    curvature: &'a CovarianceEstimate,
    val_at: &'a [(usize, usize)],
    eval_at: &'a [(usize, usize)],
}

fn run_qoi(s: &Shared<'_>, qi: usize, qoi: &Qoi) -> Result<QoiOutcome> {
    let base = &s.ensemble.members[0];
    let val = Side::new(base, qoi, &s.split.validation, s.val_at)?;
    let eval = Side::new(base, qoi, &s.split.evaluation, s.eval_at)?;
    let val_abs = val.abs_errors();
    let eval_abs = eval.abs_errors();
    let qoi_id = qoi.id();
    let stream = |tag: u64| derive_seed(s.seed, (qi as u64 + 1) << 32 | tag);

    let (reg, _) = select_regularizer(&REGULARIZER_GRID, |reg| {
        let sigma = to_covariance(s.curvature, reg)?;
        calibrated_loglik(&val_abs, &val.delta_nu(&sigma)?)
    })?;
    let sigma = to_covariance(s.curvature, reg)?;
    let val_delta = val.delta_nu(&sigma)?;
    let eval_delta = eval.delta_nu(&sigma)?;

    let cached = val
        .deltas
        .iter()
        .map(|d| block_decompose(d, &sigma))
        .collect::<Result<Vec<_>>>()?;
    let ft = finetune_scales(
        &cached,
        &val.errors,
        FinetuneObjective::Loglik,
        FinetuneConfig {
            steps: s.cfg.finetune_steps,
            ..FinetuneConfig::default()
        },
    )?;
    let tuned = sigma.with_block_scales(&ft.scales.scales())?;
    let val_tuned = val.delta_nu(&tuned)?;
    let eval_tuned = eval.delta_nu(&tuned)?;

    let dropout_seed = stream(1);
    let dropout_nu = |side: &Side, offset: u64, rate: f64| -> Result<Vec<f64>> {
        side.inputs
            .iter()
            .enumerate()
            .map(|(i, z)| dropout_variance(base, qoi, z, s.cfg.passes, rate, derive_seed(dropout_seed, offset + i as u64)))
            .collect()
    };
    let mut rate_choice: Option<(f64, f64, Vec<f64>)> = None;
    for rate in DROPOUT_RATES {
        let nu = dropout_nu(&val, 0, rate)?;
        if let Ok(ll) = calibrated_loglik(&val_abs, &nu) {
            if ll.is_finite() && rate_choice.as_ref().is_none_or(|(_, b, _)| ll > *b) {
                rate_choice = Some((rate, ll, nu));
            }
        }
    }
    let (rate, _, val_dropout) =
        rate_choice.ok_or_else(|| Error::Numerical(String::from("no dropout rate gave a finite validation score")))?;
    let eval_dropout = dropout_nu(&eval, 1 << 31, rate)?;

    let val_ens = val
        .inputs
        .iter()
        .map(|z| s.ensemble.variance(qoi, z))
        .collect::<Result<Vec<_>>>()?;
    let eval_ens = eval
        .inputs
        .iter()
        .map(|z| s.ensemble.variance(qoi, z))
        .collect::<Result<Vec<_>>>()?;

    let methods = [
        (Method::Delta, val_delta, eval_delta, Some(reg)),
        (Method::DeltaFinetuned, val_tuned, eval_tuned, Some(reg)),
        (Method::Ensemble { members: s.ensemble.len() }, val_ens, eval_ens, None),
        (Method::Dropout { passes: s.cfg.passes }, val_dropout, eval_dropout, Some(rate)),
    ];
    let sigma_kind = sigma.kind;
    let workload = Workload::new(base, qoi, &eval.inputs[0], true);
    let mut out = QoiOutcome {
        rows: Vec::new(),
        metrics: Vec::new(),
        retention: Vec::new(),
        finetune: FinetunePoint {
            qoi_id: qoi_id.clone(),
            untuned: ft.initial,
            tuned: ft.final_objective,
            scales: ft.scales.scales(),
        },
        reg,
        rate,
        flops: Vec::new(),
        sigma,
    };
    let boot_seed = stream(2);
    let all: Vec<(Method, Scores)> = methods
        .iter()
        .map(|(m, vn, en, _)| (*m, scores(&val, vn, &eval_abs, en, s.cfg.resamples, boot_seed)))
        .collect();
    let ens_scores = all[2].1.values;
    for ((method, _, eval_nu, hyper), (_, sc)) in methods.iter().zip(&all) {
        let name = String::from(method.name());
        let (kind, row_reg) = match method {
            Method::Delta => (Some(sigma_kind), Some(reg)),
            Method::DeltaFinetuned => (Some(SigmaKind::Learned), Some(reg)),
            _ => (None, None),
        };
        for (i, &(j, t)) in s.eval_at.iter().enumerate() {
            out.rows.push(ReportRow {
                input_id: format!("traj{j}-t{t}"),
                qoi_id: qoi_id.clone(),
                method: name.clone(),
                nu: eval_nu[i],
                error: Some(eval_abs[i]),
                sigma_kind: kind,
                reg: row_reg,
                oracle_kind: None,
            });
        }
        if let Ok(curve) = retention_curve(&eval_abs, eval_nu) {
            out.retention.extend(curve.into_iter().map(|(f, m)| RetentionPoint {
                qoi_id: qoi_id.clone(),
                method: name.clone(),
                fraction_removed: f,
                mean_l1: m,
            }));
        }
        let imp = |m: usize| improvement_vs_ensemble(Metric::ALL[m], sc.values[m], ens_scores[m]);
        out.metrics.push(MetricSummary {
            qoi_id: qoi_id.clone(),
            method: name,
            auc: sc.values[0],
            corr: sc.values[1],
            loglik: sc.values[2],
            improvement_auc: imp(0),
            improvement_corr: imp(1),
            improvement_loglik: imp(2),
            stderr_auc: sc.stderr[0],
            stderr_corr: sc.stderr[1],
            stderr_loglik: sc.stderr[2],
            alpha: sc.calib.alpha,
            beta: sc.calib.beta,
            hyper: *hyper,
        });
        out.flops.push((*method, cost_accounting(*method, workload).flops));
    }
    Ok(out)
}

fn context(e: Error) -> Error {
    Error::Scenario {
        scenario: "dynamics",
        source: alloc::boxed::Box::new(e),
    }
}

pub fn run_dynamics<E: Executor, C: Clock>(cfg: &DynamicsConfig, seed: u64, exec: &E, clock: &C) -> Result<ScenarioReport> {
    run_dynamics_inner(cfg, seed, exec, clock).map_err(context)
}

fn run_dynamics_inner<E: Executor, C: Clock>(cfg: &DynamicsConfig, seed: u64, exec: &E, clock: &C) -> Result<ScenarioReport> {
    if cfg.members < 2 || cfg.passes < 2 {
        return Err(invalid!("ensemble members and dropout passes must be >= 2"));
    }
    let qois: Vec<Qoi> = if cfg.qois.is_empty() {
        dynamics_qois(cfg.max_horizon)
    } else {
        cfg.qois.iter().map(|id| Qoi::parse(id)).collect::<Result<_>>()?
    };
    let horizon = qois
        .iter()
        .map(|q| match q.kind {
            QoiKind::Rollout { horizon, .. } => Ok(horizon),
            _ => Err(invalid!("dynamics QoIs must be rollouts, got {}", q.id())),
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .ok_or_else(|| invalid!("no QoIs configured"))?;
    if cfg.steps <= horizon {
        return Err(invalid!("trajectories of {} steps are too short for horizon {horizon}", cfg.steps));
    }
    let sigma_kind = SigmaKind::parse(&cfg.sigma)?;
    if !matches!(sigma_kind, SigmaKind::FisherEmaDiag | SigmaKind::FisherDiag) {
        return Err(invalid!("dynamics supports fisher-ema-diag and fisher-diag, got {}", cfg.sigma));
    }

    let split = DynamicsSplit::new(simulate(derive_seed(seed, 1), cfg.trajectories, cfg.steps, cfg.noise))?;
    let train = pairs(&split.train)?;
    let spec = MlpSpec {
        hidden: cfg.hidden.clone(),
        activation: Activation::Tanh,
        dropout: 0.0,
        residual: true,
    };
    let template = Model::new(ModelKind::Mlp(spec), STATE_DIM, STATE_DIM, 0)?;
    let ens_cfg = EnsembleConfig {
        members: cfg.members,
        mode: ResampleMode::InitOnly,
        seed: derive_seed(seed, 2),
        train: TrainConfig {
            steps: cfg.train_steps,
            polish_steps: cfg.polish_steps,
            learning_rate: cfg.learning_rate,
            batch: cfg.batch,
            grad_tol: 1e-6,
            ..TrainConfig::default()
        },
    };
    let trained: Vec<Result<(Model, f64)>> = exec.map(cfg.members, |k| {
        let t0 = clock.now();
        let m = train_member(&template, &train, &ens_cfg, k)?;
        Ok((m, clock.now() - t0))
    });
    let trained = trained.into_iter().collect::<Result<Vec<_>>>()?;
    let member_secs: Vec<f64> = trained.iter().map(|(_, s)| *s).collect();
    let ensemble = Ensemble::new(trained.into_iter().map(|(m, _)| m).collect(), ResampleMode::InitOnly)?;
    let base = &ensemble.members[0];

    let t0 = clock.now();
    let curvature = match sigma_kind {
        SigmaKind::FisherDiag => empirical_fisher(base, &train, FisherMode::Diag)?,
        _ => ema_diag_fisher(
            base,
            &train,
            &EmaConfig {
                decay: cfg.ema_decay,
                seed: derive_seed(seed, 3),
                ..EmaConfig::default()
            },
        )?,
    };
    let sigma_secs = clock.now() - t0;

    let val_at = starts(&split.validation, horizon);
    let eval_at = starts(&split.evaluation, horizon);
    if val_at.len() < 8 || eval_at.len() < 8 {
        return Err(invalid!("validation and evaluation splits need at least 8 inputs"));
    }
    let shared = Shared {
        cfg,
        seed,
        split: &split,
        ensemble: &ensemble,
        curvature: &curvature,
        val_at: &val_at,
        eval_at: &eval_at,
    };
    let outcomes: Vec<Result<QoiOutcome>> = exec.map(qois.len(), |qi| run_qoi(&shared, qi, &qois[qi]));
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = ScenarioReport::empty(ScenarioKind::Dynamics, seed);
    for o in &outcomes {
        report.rows.extend(o.rows.iter().cloned());
        report.metrics.extend(o.metrics.iter().cloned());
        report.retention.extend(o.retention.iter().cloned());
        report.finetune.push(o.finetune.clone());
    }
    for (m, method) in outcomes[0].flops.iter().map(|(m, _)| *m).enumerate() {
        let cost = outcomes.iter().map(|o| o.flops[m].1).sum::<f64>() / outcomes.len() as f64;
        for (k, metric) in Metric::ALL.into_iter().enumerate() {
            let imps: Vec<f64> = outcomes
                .iter()
                .map(|o| {
                    let s = &o.metrics[m];
                    [s.improvement_auc, s.improvement_corr, s.improvement_loglik][k]
                })
                .filter(|v| v.is_finite())
                .collect();
            let (improvement, stderr) = mean_and_stderr(&imps);
            report.cost_quality.push(CostQualityPoint {
                method: String::from(method.name()),
                metric: String::from(metric.name()),
                cost,
                improvement,
                stderr,
            });
        }
    }

    let prov = &mut report.provenance;
    prov.push((String::from("n_train"), train.len() as f64));
    prov.push((String::from("n_validation"), val_at.len() as f64));
    prov.push((String::from("n_evaluation"), eval_at.len() as f64));
    prov.push((String::from("n_params"), base.n_params() as f64));
    let (base_loss, base_grad) = crate::models::full_objective(base, &train, None, None, base.theta())?;
    prov.push((String::from("train_loss"), base_loss));
    prov.push((String::from("train_grad_norm"), crate::math::norm(&base_grad)));
    for (q, o) in qois.iter().zip(&outcomes) {
        prov.push((format!("reg.{}", q.id()), o.reg));
        prov.push((format!("dropout_rate.{}", q.id()), o.rate));
    }

    let t = &mut report.timings;
    let total: f64 = member_secs.iter().sum();
    t.push(Timing {
        label: String::from("train.delta"),
        seconds: member_secs[0] + sigma_secs,
    });
    t.push(Timing {
        label: String::from("train.dropout"),
        seconds: member_secs[0],
    });
    t.push(Timing {
        label: String::from("train.ensemble"),
        seconds: total,
    });
    let probe = timing_probe(cfg, &qois, &outcomes, &ensemble, &split, &eval_at, clock)?;
    report.timings.extend(probe);
    Ok(report)
}

/// Single-threaded seconds per variance query for each method, the minimum
/// over `timing_repeats` sweeps of `timing_inputs` inputs × all QoIs.
fn timing_probe<C: Clock>(
    cfg: &DynamicsConfig,
    qois: &[Qoi],
    outcomes: &[QoiOutcome],
    ensemble: &Ensemble,
    split: &DynamicsSplit,
    eval_at: &[(usize, usize)],
    clock: &C,
) -> Result<Vec<Timing>> {
    let base = &ensemble.members[0];
    let inputs: Vec<Vec<Vec<f64>>> = eval_at
        .iter()
        .take(cfg.timing_inputs.max(1))
        .map(|&(j, t)| vec![split.evaluation[j][t].to_vec()])
        .collect();
    let queries = (inputs.len() * qois.len()) as f64;
    let mut sink = 0.0;
    let mut best = [f64::INFINITY; 3];
    for _ in 0..cfg.timing_repeats.max(1) {
        for (m, slot) in best.iter_mut().enumerate() {
            let t0 = clock.now();
            for (q, o) in qois.iter().zip(outcomes) {
                for (i, z) in inputs.iter().enumerate() {
                    sink += match m {
                        0 => {
                            let (_, d) = q.value_and_delta(base, z)?;
                            delta_variance(&d, &o.sigma)?
                        }
                        1 => dropout_variance(base, q, z, cfg.passes, o.rate, i as u64)?,
                        _ => ensemble.variance(q, z)?,
                    };
                }
            }
            *slot = slot.min((clock.now() - t0) / queries);
        }
    }
    if !sink.is_finite() {
        return Err(Error::Numerical(String::from("non-finite variance in timing probe")));
    }
    Ok(["delta", "dropout", "ensemble"]
        .iter()
        .zip(best)
        .map(|(name, seconds)| Timing {
            label: format!("inference.{name}"),
            seconds,
        })
        .collect())
}
