use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mlp::{self, DropoutMask};
use super::{Dataset, Model, ModelKind};
use crate::error::{check_len, invalid, Error, Result};
use crate::math::norm;

/// Extra training term in total-loss units: returns `(value, gradient)` at `θ`.
/// It is added to the summed weighted negative log-likelihood before the
/// objective is divided by `N`.
pub type ExtraObjective<'a> = &'a dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Iteration cap for full-batch descent; mini-batch steps for the MLP.
    pub steps: usize,
    /// Adam step size (MLP only).
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    /// Per-example weights; `None` means all ones.
    pub weights: Option<Vec<f64>>,
    /// Stop once the norm of the objective gradient falls below this.
    pub grad_tol: f64,
    /// Full-batch descent steps run after the MLP's mini-batch phase.
    pub polish_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            batch: 32,
            seed: 0,
            weights: None,
            grad_tol: 1e-11,
            polish_steps: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn for_model(kind: &ModelKind) -> Self {
        match kind {
            ModelKind::Mlp(_) => Self {
                steps: 4_000,
                grad_tol: 1e-3,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Final objective `(1/N)(Σ wᵢ NLLᵢ + extra)`.
    pub loss: f64,
    /// Norm of the objective gradient at the returned parameters.
    pub grad_norm: f64,
    pub converged: bool,
}

pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    train_with_objective(model, data, cfg, None)
}

/// Trains from the parameters of `model` (warm start).
pub fn train_with_objective(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    extra: Option<ExtraObjective<'_>>,
) -> Result<(Model, TrainReport)> {
    check_len(model.d_in(), data.d_in())?;
    check_len(model.d_out(), data.d_out())?;
    if let Some(w) = &cfg.weights {
        check_len(data.len(), w.len())?;
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!("example weights must be finite and >= 0"));
        }
    }
    if !(cfg.grad_tol > 0.0) {
        return Err(invalid!("grad_tol must be positive"));
    }
    let objective = |theta: &[f64]| full_objective(model, data, cfg.weights.as_deref(), extra, theta);
    let mut theta = model.theta().to_vec();
    let mut offset = 0;
    if let ModelKind::Mlp(spec) = model.kind() {
        if cfg.batch == 0 || !(cfg.learning_rate > 0.0) {
            return Err(invalid!("mlp training needs batch >= 1 and a positive learning rate"));
        }
        theta = adam(model, data, cfg, extra, spec.dropout, theta)?;
        offset = cfg.steps;
        if spec.dropout > 0.0 {
            let (loss, grad) = objective(&theta)?;
            let grad_norm = norm(&grad);
            return Ok((
                model.with_theta(theta)?,
                TrainReport {
                    steps: offset,
                    loss,
                    grad_norm,
                    converged: grad_norm <= cfg.grad_tol,
                },
            ));
        }
    }
    let budget = if matches!(model.kind(), ModelKind::Mlp(_)) { cfg.polish_steps } else { cfg.steps };
    let (theta, mut report) = descend(objective, theta, budget, cfg.grad_tol)?;
    report.steps += offset;
    Ok((model.with_theta(theta)?, report))
}

/// `(1/N)(Σ wᵢ NLLᵢ + extra)` and its gradient, summed in index order.
pub(crate) fn full_objective(
    model: &Model,
    data: &Dataset,
    weights: Option<&[f64]>,
    extra: Option<ExtraObjective<'_>>,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let (ll, g) = model.loglik_and_grad_at(theta, data.input(i), data.target(i))?;
        loss -= w * ll;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a -= w * b;
        }
    }
    if let Some(extra) = extra {
        let (v, g) = extra(theta)?;
        check_len(theta.len(), g.len())?;
        loss += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.
fn descend(
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    mut x: Vec<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, TrainReport)> {
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut gn = norm(&g);
    let mut alpha = 1.0 / gn.max(1.0);
    let mut it = 0;
    while it < max_iter && gn > tol {
        it += 1;
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..80 {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - a * gi).collect();
            if let Ok((ft, gt)) = objective(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                    let decrease = f - ft;
                    let armijo = decrease >= 1e-4 * a * gn * gn;
                    // Near the optimum the loss change drowns in rounding; then a
                    // smaller gradient is the only trustworthy progress signal.
                    let flat = decrease.abs() <= 1e-14 * (1.0 + f.abs()) && norm(&gt) < gn;
                    if armijo || flat {
                        accepted = Some((trial, ft, gt, a));
                        break;
                    }
                }
            }
            a *= 0.5;
        }
        let Some((xn, fnew, gnew, a)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(p, q)| p - q).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(p, q)| p - q).collect();
        let sy: f64 = s.iter().zip(&y).map(|(p, q)| p * q).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        alpha = if sy > 0.0 { ss / sy } else { 2.0 * a };
        x = xn;
        f = fnew;
        g = gnew;
        gn = norm(&g);
    }
    Ok((
        x,
        TrainReport {
            steps: it,
            loss: f,
            grad_norm: gn,
            converged: gn <= tol,
        },
    ))
}

fn adam(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    extra: Option<ExtraObjective<'_>>,
    dropout: f64,
    mut theta: Vec<f64>,
) -> Result<Vec<f64>> {
    let layout = model.layout().expect("mlp layout");
    let ModelKind::Mlp(spec) = model.kind() else {
        unreachable!()
    };
    let widths = layout.hidden_widths();
    let n = data.len();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let batch = cfg.batch.min(n);
    let mut grad = vec![0.0; theta.len()];
    for step in 1..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut seen = 0.0;
        for _ in 0..batch {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let w = cfg.weights.as_ref().map_or(1.0, |w| w[i]);
            seen += 1.0;
            if w == 0.0 {
                continue;
            }
            let mask = (dropout > 0.0).then(|| DropoutMask::sample(&widths, dropout, &mut rng));
            let trace = mlp::forward_trace(&layout, spec.activation, spec.residual, &theta, data.input(i), mask.as_ref());
            let mut g_out = Vec::with_capacity(trace.output.len());
            for (o, t) in trace.output.iter().zip(data.target(i)) {
                let r = o - t;
                loss += 0.5 * w * r * r;
                g_out.push(w * r);
            }
            mlp::backward(&layout, spec.activation, spec.residual, &theta, &trace, mask.as_ref(), &g_out, &mut grad);
        }
        let scale = 1.0 / seen;
        grad.iter_mut().for_each(|g| *g *= scale);
        if let Some(extra) = extra {
            let (_, ge) = extra(&theta)?;
            for (a, b) in grad.iter_mut().zip(&ge) {
                *a += b / n as f64;
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        let c1 = 1.0 - libm::pow(b1, step as f64);
        let c2 = 1.0 - libm::pow(b2, step as f64);
        for k in 0..theta.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            theta[k] -= cfg.learning_rate * (m[k] / c1) / (libm::sqrt(v[k] / c2) + eps);
        }
    }
    Ok(theta)
}
