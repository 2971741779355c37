//! Quality metrics for variance predictions: retention AUC, error correlation
//! and a Laplace predictive log-likelihood.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::value_and_grad;
use crate::error::{check_len, invalid, Error, Result};
use crate::math::{mean, Real};

/// `ln 2`.
const LN_2: f64 = core::f64::consts::LN_2;

/// Removal order: decreasing variance, ties by ascending index.
fn removal_order(variances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    order
}

fn check_pairs(errors: &[f64], other: &[f64]) -> Result<()> {
    check_len(errors.len(), other.len())?;
    if errors.len() < 2 {
        return Err(invalid!("need at least two points"));
    }
    if errors.iter().chain(other).any(|v| !v.is_finite()) {
        return Err(invalid!("non-finite metric input"));
    }
    Ok(())
}

/// Mean error of the retained points after removing `k = 0..n-1` points,
/// paired with the removed fraction `k/n`.
pub fn retention_curve(errors: &[f64], variances: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pairs(errors, variances)?;
    let n = errors.len();
    let order = removal_order(variances);
    // Suffix sums over the removal order give every retained mean in one pass.
    let mut tail = Vec::with_capacity(n + 1);
    tail.push(0.0);
    for &i in order.iter().rev() {
        tail.push(tail.last().unwrap() + errors[i]);
    }
    tail.reverse();
    Ok((0..n)
        .map(|k| (k as f64 / n as f64, tail[k] / (n - k) as f64))
        .collect())
}

/// Trapezoidal area under the retention curve over its `n` points.
pub fn retention_auc(errors: &[f64], variances: &[f64]) -> Result<f64> {
    let curve = retention_curve(errors, variances)?;
    let h = 1.0 / errors.len() as f64;
    Ok(curve.windows(2).map(|w| 0.5 * h * (w[0].1 + w[1].1)).sum())
}

/// Pearson correlation of absolute errors with predicted standard deviations.
pub fn error_correlation(errors: &[f64], stddevs: &[f64]) -> Result<f64> {
    check_pairs(errors, stddevs)?;
    pearson(errors, stddevs)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical(alloc::string::String::from(
            "correlation undefined for a constant series",
        )));
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Generic Pearson correlation, used for differentiable objectives.
pub(crate) fn pearson_generic<S: Real>(a: &[f64], b: &[S]) -> S {
    let ma = mean(a);
    let n = b.len() as f64;
    let mut mb = b[0];
    for v in &b[1..] {
        mb = mb + *v;
    }
    mb = mb * (1.0 / n);
    let mut sab = mb.lift(0.0);
    let mut sbb = mb.lift(0.0);
    let mut saa = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dy = *y - mb;
        sab = sab + dy * (x - ma);
        sbb = sbb + dy * dy;
        saa += (x - ma) * (x - ma);
    }
    sab / (sbb * saa).sqrt()
}

/// Aleatoric constant α and epistemic scale β of `2b² = α + βν`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceCalibration {
    pub alpha: f64,
    pub beta: f64,
}

impl LaplaceCalibration {
    /// Homoscedastic maximum-likelihood start `(2·mean|e|², 0)`.
    pub fn homoscedastic(errors: &[f64]) -> Self {
        let b = mean(&errors.iter().map(|e| e.abs()).collect::<Vec<_>>());
        Self {
            alpha: 2.0 * b * b,
            beta: 0.0,
        }
    }
}

/// Mean `−ln 2b − |e|/b` with `b = √((α + βν)/2)`.
pub fn laplace_loglik(errors: &[f64], variances: &[f64], calib: LaplaceCalibration) -> Result<f64> {
    check_len(errors.len(), variances.len())?;
    if errors.is_empty() {
        return Err(invalid!("no points"));
    }
    let mut acc = 0.0;
    for (e, nu) in errors.iter().zip(variances) {
        let s = calib.alpha + calib.beta * nu;
        if !(s > 0.0) {
            return Err(invalid!("Laplace scale α + βν = {s} must be positive"));
        }
        let b = libm::sqrt(s / 2.0);
        acc += -libm::log(2.0 * b) - e.abs() / b;
    }
    Ok(acc / errors.len() as f64)
}

/// Generic form over `s = α + βν` (one entry per point).
pub(crate) fn laplace_loglik_generic<S: Real>(errors: &[f64], scale2: &[S]) -> S {
    let mut acc = scale2[0].lift(0.0);
    for (e, s) in errors.iter().zip(scale2) {
        let b = (*s * 0.5).sqrt();
        acc = acc - (s.ln() + LN_2) * 0.5 - b.lift(e.abs()) / b;
    }
    acc * (1.0 / errors.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentConfig {
    pub steps: usize,
    pub step: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { steps: 2000, step: 1e-2 }
    }
}

/// Gradient ascent on `x` that only accepts improving steps. The step doubles
/// after an accepted move and halves after a rejected one.
pub(crate) fn ascend(
    x0: Vec<f64>,
    cfg: AscentConfig,
    f: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<(Vec<f64>, f64)> {
    let mut x = x0;
    let (mut best, mut g) = f(&x)?;
    let mut step = cfg.step;
    for _ in 0..cfg.steps {
        if g.iter().any(|v| !v.is_finite()) || step < 1e-12 {
            break;
        }
        let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
        match f(&trial) {
            Ok((v, gt)) if v.is_finite() && v > best => {
                x = trial;
                best = v;
                g = gt;
                step *= 2.0;
            }
            _ => step *= 0.5,
        }
    }
    Ok((x, best))
}

/// Fits `(α, β)` on validation data by log-space gradient ascent. Falls back to
/// the homoscedastic start when that scores higher.
pub fn fit_calibration(errors: &[f64], variances: &[f64], cfg: AscentConfig) -> Result<LaplaceCalibration> {
    check_pairs(errors, variances)?;
    let start = LaplaceCalibration::homoscedastic(errors);
    if !(start.alpha > 0.0) {
        return Err(invalid!("all validation errors are zero"));
    }
    let start_ll = laplace_loglik(errors, variances, start)?;
    let mean_nu = mean(variances);
    if !(mean_nu > 0.0) {
        return Ok(start);
    }
    let beta0 = 1e-2 * start.alpha / mean_nu;
    let objective = |z: &[f64]| {
        value_and_grad(z, |v| {
            let alpha = v[0].exp();
            let beta = v[1].exp();
            let s: Vec<_> = variances.iter().map(|nu| alpha + beta * *nu).collect();
            laplace_loglik_generic(errors, &s)
        })
    };
    let (z, ll) = ascend(
        alloc::vec![libm::log(start.alpha), libm::log(beta0)],
        cfg,
        &objective,
    )?;
    if ll > start_ll {
        Ok(LaplaceCalibration {
            alpha: libm::exp(z[0]),
            beta: libm::exp(z[1]),
        })
    } else {
        Ok(start)
    }
}

/// Fits α alone (β = 0) by the same ascent, for checking against the closed form.
pub fn fit_alpha(errors: &[f64], cfg: AscentConfig) -> Result<f64> {
    let mean_abs = mean(&errors.iter().map(|e| e.abs()).collect::<Vec<_>>());
    if !(mean_abs > 0.0) {
        return Err(invalid!("all errors are zero"));
    }
    let objective = |z: &[f64]| {
        value_and_grad(z, |v| {
            let s: Vec<_> = errors.iter().map(|_| v[0].exp()).collect();
            laplace_loglik_generic(errors, &s)
        })
    };
    // Start an order of magnitude off so the ascent has work to do.
    let (z, _) = ascend(alloc::vec![libm::log(10.0 * mean_abs * mean_abs)], cfg, &objective)?;
    Ok(libm::exp(z[0]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Auc,
    Correlation,
    Loglik,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Auc, Metric::Correlation, Metric::Loglik];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Correlation => "corr",
            Metric::Loglik => "loglik",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Auc)
    }
}

/// Difference to the ensemble score, positive when better than the ensemble.
pub fn improvement_vs_ensemble(metric: Metric, score: f64, ensemble_score: f64) -> f64 {
    if metric.higher_is_better() {
        score - ensemble_score
    } else {
        ensemble_score - score
    }
}

/// Mean and standard error of the mean (sample sd / √n).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(values);
    if n < 2 {
        return (m, 0.0);
    }
    let var = crate::math::sample_variance(values);
    (m, libm::sqrt(var / n as f64))
}

/// Bootstrap standard error of `stat` over resampled index sets.
pub fn bootstrap_stderr(n: usize, resamples: usize, seed: u64, stat: &dyn Fn(&[usize]) -> Result<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut idx = Vec::with_capacity(n);
    for _ in 0..resamples {
        idx.clear();
        idx.extend((0..n).map(|_| rng.random_range(0..n)));
        if let Ok(v) = stat(&idx) {
            if v.is_finite() {
                values.push(v);
            }
        }
    }
    if values.len() < 2 {
        return Err(Error::Numerical(alloc::string::String::from(
            "bootstrap produced fewer than two finite statistics",
        )));
    }
    Ok(libm::sqrt(crate::math::sample_variance(&values)))
}
