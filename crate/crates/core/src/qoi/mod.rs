//! Quantities of interest `u_θ(z)`: scalar functions sharing parameters with
//! the trained model. Explicit kinds are differentiated on the tape (or by
//! hand-written backpropagation through time for MLP rollouts); fixed points
//! and eigenvalues use implicit formulas.

mod eigen;
mod fixed_point;
mod rollout;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub use eigen::{chain_eigenvalues, eigenvalue_delta, eigenvalue_derivative, solve_chain, EigenProblem, EigenSolution, GAP_THRESHOLD};
pub use fixed_point::{
    implicit_delta, solve_fixed_point, unrolled_delta, AffineMap, AverageMap, CosMap, FixedPointMap, FixedPointSolution,
    FixedPointSpec,
};

use crate::autodiff::value_and_grad;
use crate::delta_variance::GradientDelta;
use crate::error::{invalid, Result};
use crate::math::Real;
use crate::models::mlp::{self, Scratch};
use crate::models::{DropoutMask, Model, ModelKind};

/// Scalar summary of a rollout `x₁, …, x_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Functional {
    /// `x_k[component]^power`.
    StatePower { component: usize, power: u32 },
    /// Mean over the components of `x_k`.
    AreaAverage,
    /// `max_{1≤t≤k} x_t[component]`.
    WindowMax { component: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QoiKind {
    /// `f_θ(x)₀^exponent` for a single input.
    Power { exponent: f64 },
    /// `Π_j f_θ(x_j)₀` over a set of inputs.
    SetProduct,
    /// Functional of a `horizon`-step rollout `x_{t+1} = f_θ(x_t)` from `z`.
    Rollout { horizon: usize, functional: Functional },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Qoi {
    pub kind: QoiKind,
}

impl Qoi {
    pub fn new(kind: QoiKind) -> Result<Self> {
        match kind {
            QoiKind::Power { exponent } if !exponent.is_finite() => Err(invalid!("power exponent must be finite")),
            QoiKind::Rollout { horizon: 0, .. } => Err(invalid!("rollout horizon must be >= 1")),
            QoiKind::Rollout {
                functional: Functional::StatePower { power: 0, .. },
                ..
            } => Err(invalid!("state power must be >= 1")),
            _ => Ok(Self { kind }),
        }
    }

    pub fn power(exponent: f64) -> Self {
        Self {
            kind: QoiKind::Power { exponent },
        }
    }

    /// Registry id, parsed back by [`Qoi::parse`].
    pub fn id(&self) -> String {
        match self.kind {
            QoiKind::Power { exponent } => format!("power{exponent}"),
            QoiKind::SetProduct => "set-product".to_string(),
            QoiKind::Rollout { horizon, functional } => match functional {
                Functional::StatePower { component, power } => format!("rollout-pow{power}-c{component}-h{horizon}"),
                Functional::AreaAverage => format!("rollout-mean-h{horizon}"),
                Functional::WindowMax { component } => format!("rollout-max-c{component}-h{horizon}"),
            },
        }
    }

    /// Accepts `power<p>`, `set-product`, `rollout-pow<p>-c<i>-h<k>`,
    /// `rollout-mean-h<k>` and `rollout-max-c<i>-h<k>`.
    pub fn parse(id: &str) -> Result<Self> {
        let bad = || invalid!("unknown quantity of interest '{id}'");
        if id == "set-product" {
            return Self::new(QoiKind::SetProduct);
        }
        if let Some(p) = id.strip_prefix("power") {
            let exponent: f64 = p.parse().map_err(|_| bad())?;
            return Self::new(QoiKind::Power { exponent });
        }
        let rest = id.strip_prefix("rollout-").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split('-').collect();
        let num = |s: &str, prefix: &str| -> Result<usize> {
            s.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let (functional, h) = match parts.as_slice() {
            [p, c, h] if p.starts_with("pow") => (
                Functional::StatePower {
                    component: num(c, "c")?,
                    power: num(p, "pow")? as u32,
                },
                h,
            ),
            ["mean", h] => (Functional::AreaAverage, h),
            ["max", c, h] => (Functional::WindowMax { component: num(c, "c")? }, h),
            _ => return Err(bad()),
        };
        Self::new(QoiKind::Rollout {
            horizon: num(h, "h")?,
            functional,
        })
    }

    fn check(&self, model: &Model, z: &[Vec<f64>]) -> Result<()> {
        let ok = match self.kind {
            QoiKind::Power { .. } => z.len() == 1,
            QoiKind::SetProduct => !z.is_empty(),
            QoiKind::Rollout { functional, .. } => {
                let comp_ok = match functional {
                    Functional::StatePower { component, .. } | Functional::WindowMax { component } => {
                        component < model.d_out()
                    }
                    Functional::AreaAverage => true,
                };
                z.len() == 1 && model.d_in() == model.d_out() && comp_ok
            }
        };
        if !ok {
            return Err(invalid!("input set of size {} does not fit qoi '{}'", z.len(), self.id()));
        }
        for x in z {
            crate::error::check_len(model.d_in(), x.len())?;
        }
        Ok(())
    }

    /// `u_θ(z)` at arbitrary parameters, generic over the scalar type.
    pub fn eval<S: Real>(&self, model: &Model, theta: &[S], z: &[Vec<f64>]) -> S {
        match self.kind {
            QoiKind::Power { exponent } => model.forward(theta, &z[0], None)[0].powf(exponent),
            QoiKind::SetProduct => {
                let mut acc = model.forward(theta, &z[0], None)[0];
                for x in &z[1..] {
                    acc = acc * model.forward(theta, x, None)[0];
                }
                acc
            }
            QoiKind::Rollout { horizon, functional } => {
                let mut state: Vec<S> = z[0].iter().map(|v| theta[0].lift(*v)).collect();
                let mut running: Option<S> = None;
                for _ in 0..horizon {
                    state = model.forward_lifted(theta, &state);
                    if let Functional::WindowMax { component } = functional {
                        let v = state[component];
                        running = Some(running.map_or(v, |m| m.max(v)));
                    }
                }
                match functional {
                    Functional::StatePower { component, power } => powi(state[component], power),
                    Functional::AreaAverage => {
                        let mut acc = state[0];
                        for v in &state[1..] {
                            acc = acc + *v;
                        }
                        acc * (1.0 / state.len() as f64)
                    }
                    Functional::WindowMax { .. } => running.expect("horizon >= 1"),
                }
            }
        }
    }

    /// `u_θ̄(z)` at the model's parameters.
    pub fn value(&self, model: &Model, z: &[Vec<f64>]) -> Result<f64> {
        self.check(model, z)?;
        Ok(match model.kind() {
            ModelKind::Mlp(_) => self.eval_mlp(model, z, None),
            _ => self.eval(model, model.theta(), z),
        })
    }

    /// [`Qoi::eval`] at `θ̄` for an MLP on reused `f64` buffers. With `mask`,
    /// every forward pass first redraws the dropout mask.
    fn eval_mlp(&self, model: &Model, z: &[Vec<f64>], mut mask: Option<(&mut DropoutMask, &mut dyn FnMut(&mut DropoutMask))>) -> f64 {
        let ModelKind::Mlp(spec) = model.kind() else {
            unreachable!("caller dispatches MLPs only")
        };
        let layout = model.layout().expect("mlp layout");
        let theta = model.theta();
        let mut scratch = Scratch::default();
        let mut out = Vec::with_capacity(model.d_out());
        let mut fwd = |x: &[f64], out: &mut Vec<f64>| {
            let m = mask.as_mut().map(|(m, draw)| {
                draw(m);
                &**m
            });
            mlp::forward_into(&layout, spec.activation, spec.residual, theta, x, m, &mut scratch, out);
        };
        match self.kind {
            QoiKind::Power { exponent } => {
                fwd(&z[0], &mut out);
                Real::powf(out[0], exponent)
            }
            QoiKind::SetProduct => {
                fwd(&z[0], &mut out);
                let mut acc = out[0];
                for x in &z[1..] {
                    fwd(x, &mut out);
                    acc *= out[0];
                }
                acc
            }
            QoiKind::Rollout { horizon, functional } => {
                let mut state = z[0].clone();
                let mut running: Option<f64> = None;
                for _ in 0..horizon {
                    fwd(&state, &mut out);
                    core::mem::swap(&mut state, &mut out);
                    if let Functional::WindowMax { component } = functional {
                        let v = state[component];
                        running = Some(running.map_or(v, |m| Real::max(m, v)));
                    }
                }
                match functional {
                    Functional::StatePower { component, power } => powi(state[component], power),
                    Functional::AreaAverage => {
                        let mut acc = state[0];
                        for v in &state[1..] {
                            acc += *v;
                        }
                        acc * (1.0 / state.len() as f64)
                    }
                    Functional::WindowMax { .. } => running.expect("horizon >= 1"),
                }
            }
        }
    }

    /// Value and `Δ = ∇_θ u_θ(z)` on the scalar tape.
    pub fn value_and_delta_tape(&self, model: &Model, z: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        self.check(model, z)?;
        value_and_grad(model.theta(), |t| self.eval(model, t, z))
    }

    /// Value and `Δ`, using backpropagation through time for MLP rollouts and
    /// the tape otherwise.
    pub fn value_and_delta(&self, model: &Model, z: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        self.check(model, z)?;
        match (self.kind, model.kind()) {
            (QoiKind::Rollout { horizon, functional }, ModelKind::Mlp(_)) => {
                Ok(rollout::value_and_delta(model, &z[0], horizon, functional))
            }
            _ => value_and_grad(model.theta(), |t| self.eval(model, t, z)),
        }
    }

    pub fn gradient_delta(&self, model: &Model, z: &[Vec<f64>], input_id: &str) -> Result<(f64, GradientDelta)> {
        let (v, d) = self.value_and_delta(model, z)?;
        Ok((v, GradientDelta::new(d, self.id(), input_id)?))
    }

    /// `u_θ̄(z)` with a freshly drawn dropout mask on every forward pass
    /// (each rollout step gets its own mask). `draw` refills `mask` in place.
    pub fn value_with_dropout(
        &self,
        model: &Model,
        z: &[Vec<f64>],
        mask: &mut DropoutMask,
        draw: &mut dyn FnMut(&mut DropoutMask),
    ) -> Result<f64> {
        self.check(model, z)?;
        if !matches!(model.kind(), ModelKind::Mlp(_)) {
            return Err(invalid!("dropout needs an mlp model"));
        }
        let widths = model.hidden_widths();
        if mask.keep.len() != widths.len() || mask.keep.iter().zip(&widths).any(|(k, w)| k.len() != *w) {
            return Err(invalid!("dropout mask does not match the hidden widths"));
        }
        Ok(self.eval_mlp(model, z, Some((mask, draw))))
    }

    /// Forward passes behind one evaluation of `u`.
    pub fn forward_calls(&self, z: &[Vec<f64>]) -> usize {
        match self.kind {
            QoiKind::Power { .. } => 1,
            QoiKind::SetProduct => z.len(),
            QoiKind::Rollout { horizon, .. } => horizon,
        }
    }

    /// Rollout states `x₁..x_k` at the model's parameters (f64 only).
    pub fn rollout_states(model: &Model, z: &[f64], horizon: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(horizon);
        let mut state = z.to_vec();
        for _ in 0..horizon {
            state = model.forward(model.theta(), &state, None);
            out.push(state.clone());
        }
        out
    }
}

/// Applies a rollout functional to known states (e.g. the true trajectory).
pub fn apply_functional(functional: Functional, states: &[Vec<f64>]) -> f64 {
    let last = states.last().expect("non-empty rollout");
    match functional {
        Functional::StatePower { component, power } => powi(last[component], power),
        Functional::AreaAverage => last.iter().sum::<f64>() * (1.0 / last.len() as f64),
        Functional::WindowMax { component } => states
            .iter()
            .map(|s| s[component])
            .reduce(|m, v| if m >= v { m } else { v })
            .expect("non-empty"),
    }
}

fn powi<S: Real>(x: S, p: u32) -> S {
    let mut acc = x;
    for _ in 1..p {
        acc = acc * x;
    }
    acc
}

#[cfg(test)]
mod tests;
