//! Density models trained by (weighted) log-likelihood.
//!
//! Regression losses are read as Gaussian likelihoods with unit noise
//! variance, so the Fisher information and the loss Hessian share one scale.

mod dataset;
pub(crate) mod mlp;
mod train;

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dataset::Dataset;
pub use mlp::{Activation, DropoutMask, MlpSpec};
pub(crate) use train::full_objective;
pub use train::{train, train_with_objective, ExtraObjective, TrainConfig, TrainReport};

use crate::autodiff::{value_and_grad, ParameterVector};
use crate::error::{check_len, invalid, Result};
use crate::math::Real;

/// `½ ln 2π`, the Gaussian normalizer per output.
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    /// `f_θ(x) = θ`, Bernoulli outcome probability independent of `x`.
    BernoulliRate,
    /// `f_θ(x) = θᵀx` with unit-variance Gaussian noise.
    LinearRegression,
    /// `P(y = 1 | x) = σ(θᵀx)`.
    Logistic,
    Mlp(MlpSpec),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::BernoulliRate => "bernoulli-rate",
            ModelKind::LinearRegression => "linear-regression",
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp(_) => "mlp",
        }
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, ModelKind::Mlp(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    kind: ModelKind,
    d_in: usize,
    d_out: usize,
    params: ParameterVector,
}

impl Model {
    /// Fresh, untrained model. `seed` only matters for the MLP initialization.
    pub fn new(kind: ModelKind, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let params = match &kind {
            ModelKind::BernoulliRate => {
                if d_out != 1 {
                    return Err(invalid!("bernoulli-rate has exactly one output"));
                }
                ParameterVector::single(vec![0.5])?
            }
            ModelKind::LinearRegression | ModelKind::Logistic => {
                if d_out != 1 || d_in == 0 {
                    return Err(invalid!("{} needs d_in >= 1 and one output", kind.name()));
                }
                ParameterVector::single(vec![0.0; d_in])?
            }
            ModelKind::Mlp(spec) => {
                if spec.hidden.contains(&0) || d_in == 0 || d_out == 0 {
                    return Err(invalid!("mlp widths must be >= 1"));
                }
                if spec.residual && d_in != d_out {
                    return Err(invalid!("residual mlp needs d_in == d_out"));
                }
                if !(0.0..1.0).contains(&spec.dropout) {
                    return Err(invalid!("dropout rate must lie in [0, 1)"));
                }
                let layout = mlp::Layout::new(d_in, &spec.hidden, d_out);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                ParameterVector::new(layout.init(&mut rng), layout.blocks())?
            }
        };
        Ok(Self {
            kind,
            d_in,
            d_out,
            params,
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn theta(&self) -> &[f64] {
        self.params.as_slice()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Ok(Self {
            params: self.params.with_values(theta)?,
            ..self.clone()
        })
    }

    pub(crate) fn layout(&self) -> Option<mlp::Layout> {
        match &self.kind {
            ModelKind::Mlp(spec) => Some(mlp::Layout::new(self.d_in, &spec.hidden, self.d_out)),
            _ => None,
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        match &self.kind {
            ModelKind::Mlp(spec) => spec.hidden.clone(),
            _ => Vec::new(),
        }
    }

    /// Floating-point operations of one plain forward pass.
    pub fn forward_flops(&self) -> usize {
        match &self.kind {
            ModelKind::BernoulliRate => 1,
            ModelKind::LinearRegression => 2 * self.d_in,
            ModelKind::Logistic => 2 * self.d_in + 3,
            ModelKind::Mlp(_) => self.layout().map_or(0, |l| l.forward_flops()),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len(self.d_in, x.len())
    }

    /// Forward pass at arbitrary parameters, generic over the scalar type.
    ///
    /// The Bernoulli and logistic models return the success probability.
    pub fn forward<S: Real>(&self, theta: &[S], x: &[f64], mask: Option<&DropoutMask>) -> Vec<S> {
        match &self.kind {
            ModelKind::BernoulliRate => vec![theta[0]],
            ModelKind::LinearRegression => vec![linear(theta, x)],
            ModelKind::Logistic => {
                let s = linear(theta, x);
                vec![s.lift(1.0) / ((-s).exp() + 1.0)]
            }
            ModelKind::Mlp(spec) => {
                let layout = mlp::Layout::new(self.d_in, &spec.hidden, self.d_out);
                mlp::forward(&layout, spec.activation, spec.residual, theta, x, mask)
            }
        }
    }

    /// Forward pass with the input on the same scalar type as `theta`.
    pub fn forward_lifted<S: Real>(&self, theta: &[S], x: &[S]) -> Vec<S> {
        match &self.kind {
            ModelKind::BernoulliRate => vec![theta[0]],
            ModelKind::LinearRegression => vec![linear_lifted(theta, x)],
            ModelKind::Logistic => {
                let s = linear_lifted(theta, x);
                vec![s.lift(1.0) / ((-s).exp() + 1.0)]
            }
            ModelKind::Mlp(spec) => {
                let layout = mlp::Layout::new(self.d_in, &spec.hidden, self.d_out);
                mlp::forward_lifted(&layout, spec.activation, spec.residual, theta, x)
            }
        }
    }

    /// Deterministic prediction at the current parameters.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward(self.theta(), x, None))
    }

    /// Per-example log-likelihood, generic over the scalar type.
    pub fn loglik<S: Real>(&self, theta: &[S], x: &[f64], y: &[f64]) -> S {
        match &self.kind {
            ModelKind::BernoulliRate => bernoulli_loglik(theta[0], y[0]),
            ModelKind::LinearRegression => {
                let r = linear(theta, x) - y[0];
                r * r * -0.5 - HALF_LN_2PI
            }
            ModelKind::Logistic => {
                let s = linear(theta, x);
                s * y[0] - s.softplus()
            }
            ModelKind::Mlp(_) => {
                let out = self.forward(theta, x, None);
                let mut acc = out[0].lift(-(self.d_out as f64) * HALF_LN_2PI);
                for (o, &t) in out.iter().zip(y) {
                    let r = *o - t;
                    acc = acc - r * r * 0.5;
                }
                acc
            }
        }
    }

    fn check_example(&self, x: &[f64], y: &[f64]) -> Result<()> {
        self.check_input(x)?;
        check_len(self.d_out, y.len())
    }

    /// `∇_θ log f_θ(y | x)` at the current parameters.
    pub fn loglik_grad(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.loglik_and_grad_at(self.theta(), x, y)?.1)
    }

    /// Same gradient, always computed on the scalar tape.
    pub fn loglik_grad_tape(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_example(x, y)?;
        Ok(value_and_grad(self.theta(), |t| self.loglik(t, x, y))?.1)
    }

    /// Log-likelihood and its gradient at `theta` via closed forms (convex
    /// models) or layer-level backpropagation (MLP).
    pub fn loglik_and_grad_at(&self, theta: &[f64], x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_example(x, y)?;
        check_len(self.n_params(), theta.len())?;
        Ok(match &self.kind {
            ModelKind::BernoulliRate => {
                let p = theta[0];
                let mut g = 0.0;
                if y[0] != 0.0 {
                    g += y[0] / p;
                }
                if y[0] != 1.0 {
                    g -= (1.0 - y[0]) / (1.0 - p);
                }
                (bernoulli_loglik(p, y[0]), vec![g])
            }
            ModelKind::LinearRegression => {
                let r = y[0] - crate::math::dot(theta, x);
                (-0.5 * r * r - HALF_LN_2PI, x.iter().map(|xi| r * xi).collect())
            }
            ModelKind::Logistic => {
                let s = crate::math::dot(theta, x);
                let p = 1.0 / (1.0 + libm::exp(-s));
                let ll = s * y[0] - s.softplus();
                (ll, x.iter().map(|xi| (y[0] - p) * xi).collect())
            }
            ModelKind::Mlp(spec) => {
                let layout = mlp::Layout::new(self.d_in, &spec.hidden, self.d_out);
                let trace = mlp::forward_trace(&layout, spec.activation, spec.residual, theta, x, None);
                let mut ll = -(self.d_out as f64) * HALF_LN_2PI;
                let mut g_out = vec![0.0; self.d_out];
                for ((go, o), t) in g_out.iter_mut().zip(&trace.output).zip(y) {
                    let r = t - o;
                    ll -= 0.5 * r * r;
                    *go = r;
                }
                let mut grad = vec![0.0; layout.n_params];
                mlp::backward(&layout, spec.activation, spec.residual, theta, &trace, None, &g_out, &mut grad);
                (ll, grad)
            }
        })
    }
}

fn linear<S: Real>(theta: &[S], x: &[f64]) -> S {
    let mut acc = theta[0] * x[0];
    for (t, &xi) in theta.iter().zip(x).skip(1) {
        acc = acc + *t * xi;
    }
    acc
}

fn linear_lifted<S: Real>(theta: &[S], x: &[S]) -> S {
    let mut acc = theta[0] * x[0];
    for (t, xi) in theta.iter().zip(x).skip(1) {
        acc = acc + *t * *xi;
    }
    acc
}

fn bernoulli_loglik<S: Real>(p: S, y: f64) -> S {
    let mut acc = p.lift(0.0);
    if y != 0.0 {
        acc = acc + p.ln() * y;
    }
    if y != 1.0 {
        acc = acc + (-p + 1.0).ln() * (1.0 - y);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_loglik(model: &Model, x: &[f64], y: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..model.n_params())
            .map(|i| {
                let mut p = model.theta().to_vec();
                let mut m = model.theta().to_vec();
                p[i] += h;
                m[i] -= h;
                (model.loglik(&p, x, y) - model.loglik(&m, x, y)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn bernoulli_gradients() {
        let m = Model::new(ModelKind::BernoulliRate, 0, 1, 0).unwrap().with_theta(vec![0.8]).unwrap();
        assert!((m.loglik_grad(&[], &[1.0]).unwrap()[0] - 1.0 / 0.8).abs() < 1e-15);
        assert!((m.loglik_grad(&[], &[0.0]).unwrap()[0] + 1.0 / 0.2).abs() < 1e-12);
        assert_eq!(m.predict(&[]).unwrap(), vec![0.8]);
    }

    #[test]
    fn linear_gradient_matches_finite_difference() {
        let m = Model::new(ModelKind::LinearRegression, 3, 1, 0)
            .unwrap()
            .with_theta(vec![0.3, -1.1, 2.0])
            .unwrap();
        let x = [0.5, 1.5, -0.7];
        let y = [0.2];
        let g = m.loglik_grad(&x, &y).unwrap();
        let r = y[0] - (0.3 * 0.5 - 1.1 * 1.5 - 2.0 * 0.7);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - r * xi).abs() < 1e-12);
        }
        for (a, b) in g.iter().zip(fd_loglik(&m, &x, &y)) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        assert!((m.predict(&x).unwrap()[0] - (0.3 * 0.5 - 1.1 * 1.5 - 2.0 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn mlp_hand_forward() {
        // One hidden tanh unit with unit weights: f(x) = 2·tanh(x0 + x1) + 0.5
        let spec = MlpSpec {
            hidden: vec![1],
            ..MlpSpec::default()
        };
        let m = Model::new(ModelKind::Mlp(spec), 2, 1, 3).unwrap();
        // layer0: w (1x2) b (1); layer1: w (1x1) b (1)
        let m = m.with_theta(vec![1.0, 1.0, 0.0, 2.0, 0.5]).unwrap();
        let out = m.predict(&[0.2, 0.3]).unwrap();
        assert!((out[0] - (2.0 * libm::tanh(0.5) + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn mlp_backprop_matches_tape() {
        let spec = MlpSpec {
            hidden: vec![4, 3],
            ..MlpSpec::default()
        };
        let m = Model::new(ModelKind::Mlp(spec), 2, 2, 11).unwrap();
        let x = [0.4, -0.9];
        let y = [0.1, 0.7];
        let fast = m.loglik_grad(&x, &y).unwrap();
        let tape = m.loglik_grad_tape(&x, &y).unwrap();
        for (a, b) in fast.iter().zip(&tape) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = Model::new(ModelKind::LinearRegression, 2, 1, 0).unwrap();
        assert!(m.loglik_grad(&[1.0], &[0.0]).is_err());
        assert!(m.predict(&[1.0, 2.0, 3.0]).is_err());
    }
}
