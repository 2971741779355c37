use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{hessian_of, value_and_grad};
use crate::error::{check_len, invalid, Error, Result};
use crate::math::{norm, Real};
use crate::models::{train_with_objective, Dataset, MlpSpec, Model, ModelKind, TrainConfig};
use crate::qoi::Qoi;

/// Extra training point `(ε/2)(u_θ(z) − target)²` on a quantity of interest.
#[derive(Clone, Copy, Debug)]
pub struct InjectedPoint<'a> {
    pub qoi: &'a Qoi,
    pub z: &'a [Vec<f64>],
    pub target: f64,
    pub eps: f64,
}

const NEWTON_ITERS: usize = 100;

/// Minimizes `Σ wᵢ NLLᵢ (+ injected term)` starting from the parameters of
/// `model`. Linear regression and the Bernoulli rate without an injected
/// point are solved in closed form, other convex models by Newton's method,
/// MLPs by warm-started full-batch descent (`cfg.polish_steps` iterations down
/// to `cfg.grad_tol`, no mini-batch phase and no dropout).
pub fn refit(
    model: &Model,
    data: &Dataset,
    weights: Option<&[f64]>,
    injected: Option<&InjectedPoint<'_>>,
    cfg: &TrainConfig,
) -> Result<Model> {
    if let Some(w) = weights {
        check_len(data.len(), w.len())?;
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!("example weights must be finite and >= 0"));
        }
    }
    if let Some(p) = injected {
        p.qoi.value(model, p.z)?;
        if !(p.eps >= 0.0 && p.eps.is_finite() && p.target.is_finite()) {
            return Err(invalid!("injected point needs finite eps >= 0 and a finite target"));
        }
    }
    match (model.kind(), injected) {
        (ModelKind::LinearRegression, None) => weighted_least_squares(model, data, weights),
        (ModelKind::BernoulliRate, None) => weighted_rate(model, data, weights),
        (kind, _) if kind.is_convex() => newton(model, data, weights, injected),
        _ => {
            let extra = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
                let Some(p) = injected else {
                    return Ok((0.0, alloc::vec![0.0; theta.len()]));
                };
                let (u, d) = p.qoi.value_and_delta(&model.with_theta(theta.to_vec())?, p.z)?;
                let r = u - p.target;
                Ok((0.5 * p.eps * r * r, d.iter().map(|g| p.eps * r * g).collect()))
            };
            let cfg = TrainConfig {
                weights: weights.map(<[f64]>::to_vec),
                steps: 0,
                ..cfg.clone()
            };
            let base = match model.kind() {
                ModelKind::Mlp(spec) if spec.dropout > 0.0 => {
                    let spec = MlpSpec {
                        dropout: 0.0,
                        ..spec.clone()
                    };
                    Model::new(ModelKind::Mlp(spec), model.d_in(), model.d_out(), 0)?.with_theta(model.theta().to_vec())?
                }
                _ => model.clone(),
            };
            let fitted = train_with_objective(&base, data, &cfg, injected.map(|_| &extra as _))?.0;
            model.with_theta(fitted.theta().to_vec())
        }
    }
}

fn weighted_least_squares(model: &Model, data: &Dataset, weights: Option<&[f64]>) -> Result<Model> {
    let d = data.d_in();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for i in 0..data.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        let x = DVector::from_column_slice(data.input(i));
        a += &x * x.transpose() * w;
        b += x * (w * data.target(i)[0]);
    }
    let theta = a
        .cholesky()
        .ok_or(Error::Factorization { reg: 0.0 })?
        .solve(&b);
    model.with_theta(theta.iter().copied().collect())
}

fn weighted_rate(model: &Model, data: &Dataset, weights: Option<&[f64]>) -> Result<Model> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..data.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        num += w * data.target(i)[0];
        den += w;
    }
    let theta = num / den;
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Numerical(alloc::format!("refit rate {theta} is on the boundary")));
    }
    model.with_theta(alloc::vec![theta])
}

fn objective<S: Real>(model: &Model, data: &Dataset, weights: Option<&[f64]>, injected: Option<&InjectedPoint<'_>>, t: &[S]) -> S {
    let mut acc = t[0].lift(0.0);
    for i in 0..data.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w != 0.0 {
            acc = acc - model.loglik(t, data.input(i), data.target(i)) * w;
        }
    }
    if let Some(p) = injected {
        let r = p.qoi.eval(model, t, p.z) - p.target;
        acc = acc + r * r * (0.5 * p.eps);
    }
    acc
}

fn newton(model: &Model, data: &Dataset, weights: Option<&[f64]>, injected: Option<&InjectedPoint<'_>>) -> Result<Model> {
    let f = |t: &[f64]| objective(model, data, weights, injected, t);
    let mut theta = model.theta().to_vec();
    let (mut loss, mut grad) = value_and_grad(&theta, |t| objective(model, data, weights, injected, t))?;
    for _ in 0..NEWTON_ITERS {
        let h = hessian_of(&theta, |t| objective(model, data, weights, injected, t))?;
        let g = DVector::from_column_slice(&grad);
        let step = h
            .clone()
            .cholesky()
            .map(|c| c.solve(&g))
            .or_else(|| h.lu().solve(&g))
            .ok_or_else(|| Error::Numerical(alloc::string::String::from("singular Hessian during refit")))?;
        let step: Vec<f64> = step.iter().copied().collect();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let l = f(&cand);
            if l.is_finite() && l <= loss {
                let (l2, g2) = value_and_grad(&cand, |t| objective(model, data, weights, injected, t))?;
                theta = cand;
                loss = l2;
                grad = g2;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t * norm(&step) <= 1e-14 * (1.0 + norm(&theta)) {
            return model.with_theta(theta);
        }
    }
    model.with_theta(theta)
}
