use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use super::{derive_seed, ConvergencePoint, Executor, PosteriorGapPoint, ReportRow, ScenarioKind, ScenarioReport};
use crate::baselines::{Ensemble, EnsembleConfig, Method, ResampleMode};
use crate::covariance::{empirical_fisher, to_covariance, CovarianceEstimate, FisherMode, SigmaKind};
use crate::delta_variance::delta_variance;
use crate::error::{invalid, Error, Result};
use crate::models::{Dataset, Model, ModelKind, TrainConfig};
use crate::oracles::{gaussian_posterior_mc_cv, OracleKind};
use crate::qoi::Qoi;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SurvivalConfig {
    pub theta_true: f64,
    pub exponents: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Datasets drawn per size.
    pub repeats: usize,
    pub members: usize,
    /// Sizes for the posterior Monte Carlo comparison (empty to skip).
    pub gap_sizes: Vec<usize>,
    pub gap_exponent: u32,
    pub mc_samples: usize,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            theta_true: 0.9,
            exponents: vec![1, 10],
            sizes: vec![10, 100, 1_000, 10_000, 100_000],
            repeats: 100,
            members: 10,
            gap_sizes: vec![100, 1_000, 10_000, 100_000],
            gap_exponent: 10,
            mc_samples: 1_000_000,
        }
    }
}

/// Exact `Var[θᵖ]` for `θ ~ N(mu, s2)`, expanding `(mu + s·z)ᵖ` in central
/// moments of the standard normal (no cancellation between raw moments).
pub fn gaussian_power_variance(mu: f64, s2: f64, p: u32) -> f64 {
    let s = libm::sqrt(s2);
    let normal_moment = |k: u32| -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(f64::from).product()
        }
    };
    let mut coef = Vec::with_capacity(p as usize + 1);
    let mut binom = 1.0;
    for k in 0..=p {
        coef.push(binom * libm::pow(mu, f64::from(p - k)) * libm::pow(s, f64::from(k)));
        binom = binom * f64::from(p - k) / f64::from(k + 1);
    }
    let mut var = 0.0;
    for j in 1..=p {
        for k in 1..=p {
            var += coef[j as usize] * coef[k as usize] * (normal_moment(j + k) - normal_moment(j) * normal_moment(k));
        }
    }
    var
}

/// `Var[θᵖ]` for `θ ~ Beta(a, b)`.
pub fn beta_power_variance(a: f64, b: f64, p: u32) -> f64 {
    let raw = |m: u32| (0..m).map(|j| (a + f64::from(j)) / (a + b + f64::from(j))).product::<f64>();
    let m = raw(p);
    (raw(2 * p) - m * m).max(0.0)
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Cached block variances and Laplace errors for a two-block problem: block
/// 0 sets the error scale, block 1 is independent noise.
pub fn noisy_block_synthetic(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cached = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    for _ in 0..n {
        let informative: f64 = rng.random_range(0.05..2.0);
        let noise: f64 = rng.random_range(0.0..4.0);
        let b = libm::sqrt((0.05 + informative) / 2.0);
        let u: f64 = rng.random_range(-0.5..0.5);
        errors.push(-b * u.signum() * libm::log(1.0 - 2.0 * u.abs()));
        cached.push(vec![informative, noise]);
    }
    (cached, errors)
}

fn outcomes(n: usize, k: usize) -> Result<Dataset> {
    let ys: Vec<f64> = (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
    Dataset::outcomes(&ys)
}

/// Delta Variance with the canonical `Σ = F̂⁻¹/N` for every exponent.
#[allow(clippy::type_complexity)]
fn canonical(model: &Model, data: &Dataset, exponents: &[u32]) -> Result<(CovarianceEstimate, Vec<(f64, f64, Vec<f64>)>)> {
    let sigma = to_covariance(&empirical_fisher(model, data, FisherMode::Full)?, 0.0)?;
    let values = exponents
        .iter()
        .map(|&p| {
            let (u, d) = Qoi::power(f64::from(p)).value_and_delta(model, &[vec![]])?;
            Ok((u, delta_variance(&d, &sigma)?, d))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sigma, values))
}

struct Draw {
    k: usize,
    /// Per exponent: (delta, ensemble, beta posterior, |error|).
    values: Vec<(f64, f64, f64, f64)>,
}

fn context(e: Error) -> Error {
    Error::Scenario {
        scenario: "survival",
        source: alloc::boxed::Box::new(e),
    }
}

pub fn run_survival<E: Executor>(cfg: &SurvivalConfig, seed: u64, exec: &E) -> Result<ScenarioReport> {
    if !(cfg.theta_true > 0.0 && cfg.theta_true < 1.0) {
        return Err(invalid!("theta_true must lie in (0, 1)"));
    }
    if cfg.exponents.is_empty() || cfg.sizes.is_empty() || cfg.repeats == 0 || cfg.sizes.contains(&0) {
        return Err(invalid!("survival needs exponents, non-zero sizes and repeats"));
    }
    let template = Model::new(ModelKind::BernoulliRate, 0, 1, 0)?;
    let jobs = cfg.sizes.len() * cfg.repeats;
    let draws: Vec<Result<Draw>> = exec.map(jobs, |job| {
        let n = cfg.sizes[job / cfg.repeats];
        let stream = job as u64 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        let k = Binomial::new(n as u64, cfg.theta_true)
            .map_err(|e| invalid!("{e}"))?
            .sample(&mut rng) as usize;
        let data = outcomes(n, k)?;
        let model = template.with_theta(vec![k as f64 / n as f64])?;
        let (_, delta) = canonical(&model, &data, &cfg.exponents)?;
        let ens_cfg = EnsembleConfig {
            members: cfg.members,
            mode: ResampleMode::Bootstrap,
            seed: derive_seed(seed, stream | 1 << 40),
            train: TrainConfig::default(),
        };
        let ens = Ensemble::train(&template, &data, &ens_cfg)?;
        let values = cfg
            .exponents
            .iter()
            .zip(&delta)
            .map(|(&p, (u, dv, _))| {
                let ev = ens.variance(&Qoi::power(f64::from(p)), &[vec![]])?;
                let bv = beta_power_variance(k as f64 + 1.0, (n - k) as f64 + 1.0, p);
                let err = (libm::pow(cfg.theta_true, f64::from(p)) - u).abs();
                Ok((*dv, ev, bv, err))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Draw { k, values })
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>().map_err(context)?;

    let mut report = ScenarioReport::empty(ScenarioKind::Survival, seed);
    for (job, draw) in draws.iter().enumerate() {
        let n = cfg.sizes[job / cfg.repeats];
        let input_id = format!("n{n}-r{}", job % cfg.repeats);
        for (&p, &(dv, ev, _, err)) in cfg.exponents.iter().zip(&draw.values) {
            for (method, nu, sigma) in [
                (Method::Delta.name(), dv, Some(SigmaKind::FisherFull)),
                (Method::Ensemble { members: cfg.members }.name(), ev, None),
            ] {
                report.rows.push(ReportRow {
                    input_id: input_id.clone(),
                    qoi_id: format!("power{p}"),
                    method: String::from(method),
                    nu,
                    error: Some(err),
                    sigma_kind: sigma,
                    reg: sigma.map(|_| 0.0),
                    oracle_kind: None,
                });
            }
        }
    }
    for (e, &p) in cfg.exponents.iter().enumerate() {
        for (s, &n) in cfg.sizes.iter().enumerate() {
            let block = &draws[s * cfg.repeats..(s + 1) * cfg.repeats];
            let col = |f: fn(&(f64, f64, f64, f64)) -> f64| block.iter().map(|d| f(&d.values[e])).collect::<Vec<_>>();
            let (dv, ev, bv) = (col(|v| v.0), col(|v| v.1), col(|v| v.2));
            let s2 = cfg.theta_true * (1.0 - cfg.theta_true) / n as f64;
            let slope = f64::from(p) * libm::pow(cfg.theta_true, f64::from(p) - 1.0);
            report.convergence.push(ConvergencePoint {
                qoi_id: format!("power{p}"),
                n,
                true_var: gaussian_power_variance(cfg.theta_true, s2, p),
                delta_var: quantile(&dv, 0.5),
                ensemble_var: quantile(&ev, 0.5),
                beta_var: quantile(&bv, 0.5),
                linearized_var: slope * slope * s2,
                delta_lo: quantile(&dv, 0.025),
                delta_hi: quantile(&dv, 0.975),
                ensemble_lo: quantile(&ev, 0.025),
                ensemble_hi: quantile(&ev, 0.975),
            });
        }
    }
    let gaps: Vec<Result<PosteriorGapPoint>> = exec.map(cfg.gap_sizes.len(), |i| {
        let n = cfg.gap_sizes[i];
        let k = libm::round(cfg.theta_true * n as f64) as usize;
        let data = outcomes(n, k)?;
        let model = template.with_theta(vec![k as f64 / n as f64])?;
        let (sigma, mut values) = canonical(&model, &data, &[cfg.gap_exponent])?;
        let (_, dv, d) = values.remove(0);
        let cov: DMatrix<f64> = sigma.repr.to_dense();
        let p = f64::from(cfg.gap_exponent);
        let u = |t: &[f64]| libm::pow(t[0], p);
        let mc = gaussian_posterior_mc_cv(&u, &d, model.theta(), &cov, cfg.mc_samples, derive_seed(seed, 1 << 50 | i as u64))?;
        Ok(PosteriorGapPoint {
            n,
            delta_var: dv,
            mc_var: mc.estimate,
            mc_stderr: mc.stderr,
            gap: (mc.estimate - dv).abs(),
        })
    });
    for g in gaps {
        let point = g.map_err(context)?;
        let input_id = format!("n{}-center", point.n);
        let qoi_id = format!("power{}", cfg.gap_exponent);
        report.rows.push(ReportRow {
            input_id: input_id.clone(),
            qoi_id: qoi_id.clone(),
            method: String::from(Method::Delta.name()),
            nu: point.delta_var,
            error: None,
            sigma_kind: Some(SigmaKind::FisherFull),
            reg: Some(0.0),
            oracle_kind: None,
        });
        report.rows.push(ReportRow {
            input_id,
            qoi_id,
            method: String::from("oracle"),
            nu: point.mc_var,
            error: None,
            sigma_kind: Some(SigmaKind::FisherFull),
            reg: Some(0.0),
            oracle_kind: Some(OracleKind::PosteriorMc),
        });
        report.posterior_gap.push(point);
    }
    report.provenance.push((String::from("theta_true"), cfg.theta_true));
    report.provenance.push((String::from("repeats"), cfg.repeats as f64));
    report.provenance.push((String::from("members"), cfg.members as f64));
    report.provenance.push((String::from("mc_samples"), cfg.mc_samples as f64));
    let boundary = draws
        .iter()
        .enumerate()
        .filter(|(job, d)| d.k == 0 || d.k == cfg.sizes[job / cfg.repeats])
        .count();
    report.provenance.push((String::from("boundary_datasets"), boundary as f64));
    Ok(report)
}
