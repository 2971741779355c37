//! Reference estimators used to validate the Delta Variance: Monte-Carlo over
//! a Gaussian posterior, leave-one-out and ε-down-weighted retraining,
//! adversarial data injection and the gradient-space Mahalanobis distance.
//!
//! Convex models are refit exactly (weighted normal equations for linear
//! regression, weighted means for the Bernoulli rate, Newton on the tape
//! Hessian otherwise). MLPs are re-optimized from a warm start.

mod refit;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use refit::{refit, InjectedPoint};

use crate::covariance::{invert, per_example_grads, smallest_stable_regularizer, CovarianceEstimate, Repr, Role, SigmaKind};
use crate::error::{check_len, invalid, Error, Result};
use crate::math::{mean, population_variance};
use crate::models::{Dataset, Model, TrainConfig};
use crate::qoi::Qoi;

/// Largest training set accepted by the retraining oracles (one refit per point).
pub const MAX_LOO_POINTS: usize = 500;

/// Down-weightings used to extrapolate the ε-LOO variance to ε → 0.
pub const RICHARDSON_EPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OracleKind {
    PosteriorMc,
    Loo,
    EpsLoo,
    InfinitesimalJackknife,
    AdversarialOffset,
    AdversarialNoise,
    Mahalanobis,
}

impl OracleKind {
    pub const ALL: [OracleKind; 7] = [
        OracleKind::PosteriorMc,
        OracleKind::Loo,
        OracleKind::EpsLoo,
        OracleKind::InfinitesimalJackknife,
        OracleKind::AdversarialOffset,
        OracleKind::AdversarialNoise,
        OracleKind::Mahalanobis,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown oracle kind '{s}'"))
    }

    pub fn name(self) -> &'static str {
        match self {
            OracleKind::PosteriorMc => "posterior-mc",
            OracleKind::Loo => "loo",
            OracleKind::EpsLoo => "eps-loo",
            OracleKind::InfinitesimalJackknife => "ij",
            OracleKind::AdversarialOffset => "adv-offset",
            OracleKind::AdversarialNoise => "adv-noise",
            OracleKind::Mahalanobis => "mahalanobis",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub kind: OracleKind,
    pub estimate: f64,
    /// Standard error for sampled oracles. Deterministic oracles report 0,
    /// except the extrapolated jackknife, which reports the size of its last
    /// Richardson correction.
    pub stderr: f64,
    /// Posterior draws, retrainings or noise draws behind the estimate.
    pub samples: usize,
    pub seed: u64,
}

/// `N/ε²` follows the proof of the jackknife identity; `(N−ε)/ε²` is the
/// prefactor of the ε-LOO definition. They differ at order `ε/N`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EpsLooPrefactor {
    #[default]
    Proof,
    Definition,
}

impl EpsLooPrefactor {
    pub fn value(self, n: usize, eps: f64) -> f64 {
        match self {
            EpsLooPrefactor::Proof => n as f64 / (eps * eps),
            EpsLooPrefactor::Definition => (n as f64 - eps) / (eps * eps),
        }
    }
}

/// `F` with `F Fᵀ = Σ` from the eigendecomposition; tolerates round-off
/// negative eigenvalues.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(invalid!("covariance must be square"));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(alloc::string::String::from("covariance has non-finite entries")));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::Numerical(alloc::string::String::from("covariance is not positive semi-definite")));
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0))));
    Ok(&eig.eigenvectors * roots)
}

fn draw(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}

/// Sample variance of `u(θ)` over `θ ~ N(mean, cov)`.
pub fn gaussian_posterior_mc(
    u: &dyn Fn(&[f64]) -> f64,
    mean_theta: &[f64],
    cov: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    if samples < 2 {
        return Err(invalid!("need at least 2 posterior samples"));
    }
    check_len(mean_theta.len(), cov.nrows())?;
    let factor = psd_factor(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = mean_theta.to_vec();
    let values: Vec<f64> = (0..samples)
        .map(|_| {
            let step = draw(&mut rng, &factor);
            for (t, (m, s)) in theta.iter_mut().zip(mean_theta.iter().zip(step.iter())) {
                *t = m + s;
            }
            u(&theta)
        })
        .collect();
    let var = crate::math::sample_variance(&values);
    let m = mean(&values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    Ok(OracleReport {
        kind: OracleKind::PosteriorMc,
        estimate: var,
        stderr: libm::sqrt(crate::math::sample_variance(&sq) / samples as f64),
        samples,
        seed,
    })
}

/// Same target as [`gaussian_posterior_mc`] with antithetic pairs and the
/// linearization `Δᵀ(θ − θ̄)` as control variate: the estimate is
/// `ΔᵀΣΔ + (V̂ar[u] − V̂ar[Δᵀ(θ − θ̄)])`, so the sampling error scales with the
/// nonlinear part of `u` rather than with its variance.
pub fn gaussian_posterior_mc_cv(
    u: &dyn Fn(&[f64]) -> f64,
    delta: &[f64],
    mean_theta: &[f64],
    cov: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    if samples < 4 {
        return Err(invalid!("need at least 4 posterior samples"));
    }
    check_len(mean_theta.len(), cov.nrows())?;
    check_len(mean_theta.len(), delta.len())?;
    let factor = psd_factor(cov)?;
    let d = DVector::from_column_slice(delta);
    let linear_var = d.dot(&(cov * &d));
    let pairs = samples / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plus = mean_theta.to_vec();
    let mut minus = mean_theta.to_vec();
    let mut rows: Vec<(f64, f64, f64)> = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let step = draw(&mut rng, &factor);
        for j in 0..plus.len() {
            plus[j] = mean_theta[j] + step[j];
            minus[j] = mean_theta[j] - step[j];
        }
        rows.push((u(&plus), u(&minus), d.dot(&step)));
    }
    // Deviations from the first value keep a constant `u` exactly at zero.
    let u0 = rows[0].0;
    let shift = rows.iter().map(|r| (r.0 - u0) + (r.1 - u0)).sum::<f64>() / (2 * pairs) as f64;
    let dev = |v: f64| v - u0 - shift;
    let per_pair: Vec<f64> = rows
        .iter()
        .map(|(a, b, l)| 0.5 * (dev(*a) * dev(*a) + dev(*b) * dev(*b)) - l * l)
        .collect();
    Ok(OracleReport {
        kind: OracleKind::PosteriorMc,
        estimate: linear_var + mean(&per_pair),
        stderr: libm::sqrt(crate::math::sample_variance(&per_pair) / pairs as f64),
        samples: 2 * pairs,
        seed,
    })
}

fn check_retraining(data: &Dataset) -> Result<()> {
    if data.len() > MAX_LOO_POINTS {
        return Err(Error::Resource {
            what: "leave-one-out retrainings",
            requested: data.len(),
            cap: MAX_LOO_POINTS,
        });
    }
    if data.len() < 2 {
        return Err(invalid!("leave-one-out needs at least 2 training points"));
    }
    Ok(())
}

/// `u_{θᵢ}(z)` where `θᵢ` is refit with the weight of point `i` set to `1 − eps`
/// (`eps = 1` removes it).
pub fn downweighted_value(
    model: &Model,
    data: &Dataset,
    qoi: &Qoi,
    z: &[Vec<f64>],
    i: usize,
    eps: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    if i >= data.len() {
        return Err(invalid!("point {i} out of range for {} training points", data.len()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(invalid!("eps must lie in (0, 1]"));
    }
    let mut w = vec![1.0; data.len()];
    w[i] = 1.0 - eps;
    let fitted = refit(model, data, Some(&w), None, cfg)?;
    qoi.value(&fitted, z)
}

/// Population variance over `i` of the leave-one-out predictions.
pub fn loo_variance(model: &Model, data: &Dataset, qoi: &Qoi, z: &[Vec<f64>], cfg: &TrainConfig) -> Result<OracleReport> {
    check_retraining(data)?;
    qoi.value(model, z)?;
    let values = (0..data.len())
        .map(|i| downweighted_value(model, data, qoi, z, i, 1.0, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(loo_report(OracleKind::Loo, &values, 1.0, cfg.seed))
}

/// `prefactor · Var_i u_{θᵢ}(z)` with point `i` down-weighted by `eps`.
pub fn eps_loo_variance(
    model: &Model,
    data: &Dataset,
    qoi: &Qoi,
    z: &[Vec<f64>],
    eps: f64,
    prefactor: EpsLooPrefactor,
    cfg: &TrainConfig,
) -> Result<OracleReport> {
    check_retraining(data)?;
    qoi.value(model, z)?;
    let values = (0..data.len())
        .map(|i| downweighted_value(model, data, qoi, z, i, eps, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(loo_report(OracleKind::EpsLoo, &values, prefactor.value(data.len(), eps), cfg.seed))
}

/// Aggregates per-point retrained predictions (in index order).
pub fn loo_report(kind: OracleKind, values: &[f64], prefactor: f64, seed: u64) -> OracleReport {
    OracleReport {
        kind,
        estimate: prefactor * population_variance(values),
        stderr: 0.0,
        samples: values.len(),
        seed,
    }
}

/// Two rounds of Richardson extrapolation over `eps, eps/2, eps/4`, assuming
/// an error expansion in integer powers of `eps`.
pub fn richardson(values: [f64; 3]) -> (f64, f64) {
    let r1a = 2.0 * values[1] - values[0];
    let r1b = 2.0 * values[2] - values[1];
    let r2 = (4.0 * r1b - r1a) / 3.0;
    (r2, (r2 - r1b).abs())
}

/// ε-LOO variance extrapolated to ε → 0 over [`RICHARDSON_EPS`].
pub fn infinitesimal_jackknife(
    model: &Model,
    data: &Dataset,
    qoi: &Qoi,
    z: &[Vec<f64>],
    prefactor: EpsLooPrefactor,
    cfg: &TrainConfig,
) -> Result<OracleReport> {
    let mut v = [0.0; 3];
    for (slot, eps) in v.iter_mut().zip(RICHARDSON_EPS) {
        *slot = eps_loo_variance(model, data, qoi, z, eps, prefactor, cfg)?.estimate;
    }
    let (estimate, stderr) = richardson(v);
    Ok(OracleReport {
        kind: OracleKind::InfinitesimalJackknife,
        estimate,
        stderr,
        samples: 3 * data.len(),
        seed: cfg.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdversarialMode {
    /// Target `y = u_θ̄(z) − δ`.
    Offset { delta: f64 },
    /// Target `y = u_θ̄(z) − δ` with `δ ~ N(0, σ²)` redrawn `draws` times.
    Noise { sigma: f64, draws: usize },
}

/// Retrains with the extra term `(ε/2)(u_θ(z) − y)²` and measures how far the
/// prediction moves: `|u_θ̄ − u_adv|` (offset) or `E[(u_θ̄ − u_noisy)²]` (noise).
#[allow(clippy::too_many_arguments)]
pub fn adversarial_shift(
    model: &Model,
    data: &Dataset,
    qoi: &Qoi,
    z: &[Vec<f64>],
    mode: AdversarialMode,
    eps: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<OracleReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid!("eps must be positive"));
    }
    let base = qoi.value(model, z)?;
    let shifted = |delta: f64| -> Result<f64> {
        let point = InjectedPoint {
            qoi,
            z,
            target: base - delta,
            eps,
        };
        let fitted = refit(model, data, None, Some(&point), cfg)?;
        Ok(base - qoi.value(&fitted, z)?)
    };
    match mode {
        AdversarialMode::Offset { delta } => {
            if !delta.is_finite() {
                return Err(invalid!("offset must be finite"));
            }
            Ok(OracleReport {
                kind: OracleKind::AdversarialOffset,
                estimate: shifted(delta)?.abs(),
                stderr: 0.0,
                samples: 1,
                seed,
            })
        }
        AdversarialMode::Noise { sigma, draws } => {
            if draws < 2 || !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(invalid!("noise mode needs draws >= 2 and a finite sigma >= 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sq = (0..draws)
                .map(|_| {
                    let delta = sigma * rng.sample::<f64, _>(StandardNormal);
                    shifted(delta).map(|s| s * s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OracleReport {
                kind: OracleKind::AdversarialNoise,
                estimate: mean(&sq),
                stderr: libm::sqrt(crate::math::sample_variance(&sq) / draws as f64),
                samples: draws,
                seed,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisReport {
    /// `(Δ − μ)ᵀ C⁻¹ (Δ − μ)`.
    pub distance: f64,
    /// Ridge added to `C` when it was not invertible as is.
    pub regularizer: f64,
    /// `‖μ‖`, the norm of the mean training gradient. Zero at convergence.
    pub mean_grad_norm: f64,
}

/// Squared Mahalanobis distance of `Δ = ∇u(z)` from the cloud of training
/// gradients `∇log f(xᵢ)`, with mean `μ` and centered covariance `C`.
pub fn mahalanobis_gradient_distance(model: &Model, data: &Dataset, qoi: &Qoi, z: &[Vec<f64>]) -> Result<MahalanobisReport> {
    let (_, delta) = qoi.value_and_delta(model, z)?;
    let grads = per_example_grads(model, data)?;
    let n = grads.len();
    let p = delta.len();
    let mut mu = vec![0.0; p];
    for g in &grads {
        for (m, v) in mu.iter_mut().zip(g) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = DMatrix::zeros(p, p);
    for g in &grads {
        let centered = DVector::from_iterator(p, g.iter().zip(&mu).map(|(a, b)| a - b));
        c += &centered * centered.transpose();
    }
    c /= n as f64;
    let cov = CovarianceEstimate::new(SigmaKind::FisherFull, Repr::Full(c), Role::Curvature, n, model.params().blocks().to_vec())?;
    let (inv, reg) = match invert(&cov, 0.0) {
        Ok(inv) => (inv, 0.0),
        Err(_) => {
            let reg = smallest_stable_regularizer(&cov)?;
            (invert(&cov, reg)?, reg)
        }
    };
    let shifted: Vec<f64> = delta.iter().zip(&mu).map(|(a, b)| a - b).collect();
    Ok(MahalanobisReport {
        distance: inv.quadratic_form(&shifted)?,
        regularizer: reg,
        mean_grad_norm: crate::math::norm(&mu),
    })
}
