//! The estimator `ν(z) = Δᵀ Σ Δ`, its per-block split, and fine-tuning of
//! per-block scale factors on validation data.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::value_and_grad;
use crate::covariance::{CovarianceEstimate, Repr, Role};
use crate::error::{check_len, invalid, structural, Result};
use crate::evaluation::{
    ascend, fit_calibration, laplace_loglik, laplace_loglik_generic, pearson, pearson_generic, AscentConfig,
    LaplaceCalibration,
};
use crate::math::Real;

/// `Δ = ∇_θ u_θ(z)` tagged with the QoI and input it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDelta {
    pub vector: Vec<f64>,
    pub source: String,
    pub input: String,
}

impl GradientDelta {
    pub fn new(vector: Vec<f64>, source: impl Into<String>, input: impl Into<String>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("gradient delta contains non-finite entries"));
        }
        Ok(Self {
            vector,
            source: source.into(),
            input: input.into(),
        })
    }
}

fn require_covariance(sigma: &CovarianceEstimate) -> Result<()> {
    if sigma.role != Role::Covariance {
        return Err(structural!(
            "{} estimate is a curvature matrix; invert it into a covariance first",
            sigma.kind.name()
        ));
    }
    Ok(())
}

/// `Δᵀ Σ Δ`.
pub fn delta_variance(delta: &[f64], sigma: &CovarianceEstimate) -> Result<f64> {
    require_covariance(sigma)?;
    sigma.quadratic_form(delta)
}

/// Per-block terms `Δ_bᵀ Σ_bb Δ_b` of a block-diagonal Σ, in block order.
pub fn block_decompose(delta: &[f64], sigma: &CovarianceEstimate) -> Result<Vec<f64>> {
    require_covariance(sigma)?;
    check_len(sigma.dim(), delta.len())?;
    if !sigma.is_block_diagonal() {
        return Err(structural!("block decomposition needs a block-diagonal covariance"));
    }
    Ok(sigma
        .blocks
        .iter()
        .map(|b| match &sigma.repr {
            Repr::Diagonal(d) => b.range().map(|i| d[i] * delta[i] * delta[i]).sum(),
            Repr::Full(m) => {
                let mut acc = 0.0;
                for j in b.range() {
                    let mut inner = 0.0;
                    for i in b.range() {
                        inner += m[(i, j)] * delta[i];
                    }
                    acc += delta[j] * inner;
                }
                acc
            }
        })
        .collect())
}

/// `Σ_b c_b · cached[b]` for one validation point.
pub fn recombine(per_block: &[f64], scales: &[f64]) -> f64 {
    per_block.iter().zip(scales).map(|(v, c)| v * c).sum()
}

/// Positive per-block factors stored through their logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockScales {
    pub log_scales: Vec<f64>,
}

impl BlockScales {
    pub fn ones(blocks: usize) -> Self {
        Self {
            log_scales: vec![0.0; blocks],
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scales.iter().map(|z| libm::exp(*z)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneObjective {
    /// Laplace log-likelihood, with α and β learned jointly with the scales.
    Loglik,
    /// Pearson correlation of |error| with the predicted standard deviation.
    Correlation,
}

impl FinetuneObjective {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneObjective::Loglik => "loglik",
            FinetuneObjective::Correlation => "corr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub step: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 500, step: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub scales: BlockScales,
    /// Laplace calibration matching the returned scales (loglik objective).
    pub calibration: Option<LaplaceCalibration>,
    /// Validation objective with all scales at 1.
    pub initial: f64,
    pub final_objective: f64,
}

/// Validation objective for given scales. For the loglik objective a
/// calibration must be supplied.
pub fn finetune_objective(
    cached: &[Vec<f64>],
    errors: &[f64],
    scales: &[f64],
    objective: FinetuneObjective,
    calibration: Option<LaplaceCalibration>,
) -> Result<f64> {
    let nu: Vec<f64> = cached.iter().map(|row| recombine(row, scales)).collect();
    match objective {
        FinetuneObjective::Correlation => {
            let sd: Vec<f64> = nu.iter().map(|v| libm::sqrt(*v)).collect();
            let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
            pearson(&abs, &sd)
        }
        FinetuneObjective::Loglik => laplace_loglik(
            errors,
            &nu,
            calibration.ok_or_else(|| invalid!("loglik objective needs a calibration"))?,
        ),
    }
}

/// Maximizes the validation objective over per-block scales.
///
/// `cached[p][b]` is the block-`b` Delta Variance of validation point `p` and
/// `errors[p]` its prediction error. Only improving steps are taken, so the
/// result never scores below the all-ones start.
pub fn finetune_scales(
    cached: &[Vec<f64>],
    errors: &[f64],
    objective: FinetuneObjective,
    cfg: FinetuneConfig,
) -> Result<FinetuneReport> {
    check_len(cached.len(), errors.len())?;
    let n_blocks = cached.first().map_or(0, |r| r.len());
    if n_blocks == 0 || cached.iter().any(|r| r.len() != n_blocks) {
        return Err(structural!("cached block variances must form a non-empty rectangular matrix"));
    }
    if cached.len() < n_blocks {
        return Err(invalid!(
            "{} validation points cannot determine {} block scales",
            cached.len(),
            n_blocks
        ));
    }
    if cached.iter().flatten().chain(errors).any(|v| !v.is_finite()) || cached.iter().flatten().any(|v| *v < 0.0) {
        return Err(invalid!("cached variances must be finite and >= 0, errors finite"));
    }
    let ones = vec![1.0; n_blocks];
    let ascent = AscentConfig {
        steps: cfg.steps,
        step: cfg.step,
    };
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    match objective {
        FinetuneObjective::Correlation => {
            let initial = finetune_objective(cached, errors, &ones, objective, None)?;
            let f = |z: &[f64]| {
                value_and_grad(z, |v| {
                    let sd: Vec<_> = cached.iter().map(|row| weighted(row, v).sqrt()).collect();
                    pearson_generic(&abs, &sd)
                })
            };
            let (z, best) = ascend(vec![0.0; n_blocks], ascent, &f)?;
            Ok(pick(z, best, initial, None, None))
        }
        FinetuneObjective::Loglik => {
            let nu: Vec<f64> = cached.iter().map(|row| recombine(row, &ones)).collect();
            let calib0 = fit_calibration(errors, &nu, AscentConfig::default())?;
            let initial = laplace_loglik(errors, &nu, calib0)?;
            let mean_nu = crate::math::mean(&nu);
            let beta_start = if calib0.beta > 0.0 {
                calib0.beta
            } else if mean_nu > 0.0 {
                1e-2 * calib0.alpha / mean_nu
            } else {
                return Ok(pick(vec![0.0; n_blocks], initial, initial, Some(calib0), Some(calib0)));
            };
            let f = |z: &[f64]| {
                value_and_grad(z, |v| {
                    let alpha = v[0].exp();
                    let beta = v[1].exp();
                    let s: Vec<_> = cached.iter().map(|row| alpha + beta * weighted(row, &v[2..])).collect();
                    laplace_loglik_generic(errors, &s)
                })
            };
            let mut z0 = vec![libm::log(calib0.alpha), libm::log(beta_start)];
            z0.extend(core::iter::repeat_n(0.0, n_blocks));
            let (z, best) = ascend(z0, ascent, &f)?;
            let calib = LaplaceCalibration {
                alpha: libm::exp(z[0]),
                beta: libm::exp(z[1]),
            };
            Ok(pick(z[2..].to_vec(), best, initial, Some(calib), Some(calib0)))
        }
    }
}

fn weighted<S: Real>(row: &[f64], log_scales: &[S]) -> S {
    let mut acc = log_scales[0].exp() * row[0];
    for (z, v) in log_scales.iter().zip(row).skip(1) {
        acc = acc + z.exp() * *v;
    }
    acc
}

fn pick(
    z: Vec<f64>,
    best: f64,
    initial: f64,
    calib: Option<LaplaceCalibration>,
    calib0: Option<LaplaceCalibration>,
) -> FinetuneReport {
    if best > initial {
        FinetuneReport {
            scales: BlockScales { log_scales: z },
            calibration: calib,
            initial,
            final_objective: best,
        }
    } else {
        FinetuneReport {
            scales: BlockScales::ones(z.len()),
            calibration: calib0,
            initial,
            final_objective: initial,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Block;
    use crate::covariance::SigmaKind;
    use crate::testutil::rel_err;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_sigma(d: Vec<f64>, blocks: Vec<Block>) -> CovarianceEstimate {
        CovarianceEstimate::new(SigmaKind::FisherDiag, Repr::Diagonal(d), Role::Covariance, 1, blocks).unwrap()
    }

    #[test]
    fn trivial_cases() {
        let id = CovarianceEstimate::identity(3).unwrap();
        assert_eq!(delta_variance(&[0.0; 3], &id).unwrap(), 0.0);
        assert_eq!(delta_variance(&[1.0, 2.0, 2.0], &id).unwrap(), 9.0);
        assert!(delta_variance(&[1.0, 2.0], &id).is_err());
        let curvature = CovarianceEstimate { role: Role::Curvature, ..id };
        assert!(delta_variance(&[1.0, 2.0, 2.0], &curvature).is_err());
    }

    #[test]
    fn survival_power_ten() {
        let (theta, n) = (0.9f64, 100.0);
        let delta = 10.0 * libm::pow(theta, 9.0);
        let sigma = diag_sigma(vec![theta * (1.0 - theta) / n], crate::autodiff::default_layout(1));
        let nu = delta_variance(&[delta], &sigma).unwrap();
        assert!(rel_err(nu, delta * delta * 0.0009) < 1e-14);
    }

    #[test]
    fn block_split_sums_to_total() {
        let blocks = vec![Block::new("a", 0, 2), Block::new("b", 2, 1)];
        let sigma = diag_sigma(vec![1.0, 1.0, 1.0], blocks.clone());
        let parts = block_decompose(&[3.0, 4.0, 2.0], &sigma).unwrap();
        assert_eq!(parts, vec![25.0, 4.0]);
        let single = block_decompose(&[3.0, 4.0], &CovarianceEstimate::identity(2).unwrap()).unwrap();
        assert_eq!(single, vec![25.0]);
        let dense = CovarianceEstimate::new(
            SigmaKind::FisherFull,
            Repr::Full(DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.2, 0.1, 1.0, 0.0, 0.2, 0.0, 1.0])),
            Role::Covariance,
            1,
            blocks,
        )
        .unwrap();
        assert!(block_decompose(&[1.0, 1.0, 1.0], &dense).is_err());
    }

    #[test]
    fn four_block_mlp_layout_recombines() {
        let layout = crate::models::mlp::Layout::new(2, &[3], 1);
        let blocks = layout.blocks();
        assert_eq!(blocks.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<f64> = (0..layout.n_params).map(|_| rng.random_range(0.1..2.0)).collect();
        let delta: Vec<f64> = (0..layout.n_params).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = diag_sigma(d.clone(), blocks);
        let parts = block_decompose(&delta, &sigma).unwrap();
        let direct: f64 = d.iter().zip(&delta).map(|(s, x)| s * x * x).sum();
        assert!(rel_err(parts.iter().sum(), direct) < 1e-12);
        assert!(rel_err(recombine(&parts, &[1.0; 4]), delta_variance(&delta, &sigma).unwrap()) < 1e-12);
    }

    #[test]
    fn refuses_underdetermined_finetune() {
        let cached = vec![vec![1.0, 2.0, 3.0]; 2];
        assert!(finetune_scales(&cached, &[0.1, 0.2], FinetuneObjective::Correlation, FinetuneConfig::default()).is_err());
    }

    #[test]
    fn calibrated_correlation_is_stationary() {
        // |e| = √ν exactly: correlation is already 1, the maximum.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cached: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)]).collect();
        let errors: Vec<f64> = cached.iter().map(|r| libm::sqrt(r[0] + r[1])).collect();
        let rep = finetune_scales(&cached, &errors, FinetuneObjective::Correlation, FinetuneConfig::default()).unwrap();
        for c in rep.scales.scales() {
            assert!((c - 1.0).abs() < 0.01, "{c}");
        }
        assert!(rep.final_objective >= rep.initial);
    }

    #[test]
    fn calibrated_loglik_single_block_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cached = Vec::new();
        let mut errors = Vec::new();
        for _ in 0..300 {
            let nu: f64 = rng.random_range(0.1..3.0);
            let b = libm::sqrt((0.5 + 2.0 * nu) / 2.0);
            let u: f64 = rng.random_range(-0.5..0.5);
            errors.push(-b * u.signum() * libm::log(1.0 - 2.0 * u.abs()));
            cached.push(vec![nu]);
        }
        let rep = finetune_scales(&cached, &errors, FinetuneObjective::Loglik, FinetuneConfig::default()).unwrap();
        // With one block the scale and β are interchangeable, and β already sits at its optimum.
        assert!((rep.scales.scales()[0] - 1.0).abs() < 0.01, "{rep:?}");
        assert!(rep.final_objective >= rep.initial);
    }

    #[test]
    fn noisy_block_shrinks() {
        let (cached, errors) = crate::bench::noisy_block_synthetic(400, 6);
        let rep = finetune_scales(&cached, &errors, FinetuneObjective::Loglik, FinetuneConfig::default()).unwrap();
        let c = rep.scales.scales();
        assert!(c[1] < 0.1 * c[0].max(1.0) && c[1] < 0.1, "{c:?}");
        assert!(rep.final_objective > rep.initial);
        let check = finetune_objective(&cached, &errors, &c, FinetuneObjective::Loglik, rep.calibration).unwrap();
        assert!(rel_err(check, rep.final_objective) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn homogeneity(
            d in proptest::collection::vec(0.0f64..3.0, 4),
            delta in proptest::collection::vec(-2.0f64..2.0, 4),
            c in 0.1f64..10.0,
        ) {
            let sigma = diag_sigma(d, crate::autodiff::default_layout(4));
            let nu = delta_variance(&delta, &sigma).unwrap();
            let scaled: Vec<f64> = delta.iter().map(|x| c * x).collect();
            prop_assert!((delta_variance(&scaled, &sigma).unwrap() - c * c * nu).abs() <= 1e-12 * (1.0 + c * c * nu));
            prop_assert!((delta_variance(&delta, &sigma.scaled(c)).unwrap() - c * nu).abs() <= 1e-12 * (1.0 + c * nu));
            prop_assert!(nu >= 0.0);
        }

        #[test]
        fn finetune_never_worse(seed in 0u64..1000) {
            let (cached, errors) = crate::bench::noisy_block_synthetic(30, seed);
            for objective in [FinetuneObjective::Loglik, FinetuneObjective::Correlation] {
                let cfg = FinetuneConfig { steps: 40, ..Default::default() };
                let rep = finetune_scales(&cached, &errors, objective, cfg).unwrap();
                prop_assert!(rep.final_objective >= rep.initial);
            }
        }
    }
}
