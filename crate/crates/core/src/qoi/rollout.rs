use alloc::vec;
use alloc::vec::Vec;

use super::{apply_functional, Functional};
use crate::models::mlp::{self, Trace};
use crate::models::{Model, ModelKind};

/// Backpropagation through time for an MLP step model.
pub(super) fn value_and_delta(model: &Model, z: &[f64], horizon: usize, functional: Functional) -> (f64, Vec<f64>) {
    let ModelKind::Mlp(spec) = model.kind() else {
        unreachable!("caller dispatches MLPs only")
    };
    let layout = model.layout().expect("mlp layout");
    let theta = model.theta();
    let mut traces: Vec<Trace> = Vec::with_capacity(horizon);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut state = z.to_vec();
    for _ in 0..horizon {
        let trace = mlp::forward_trace(&layout, spec.activation, spec.residual, theta, &state, None);
        state = trace.output.clone();
        states.push(state.clone());
        traces.push(trace);
    }
    let value = apply_functional(functional, &states);

    // ∂u/∂x_t for t = 1..k.
    let d = state.len();
    let mut seeds = vec![vec![0.0; d]; horizon];
    match functional {
        Functional::StatePower { component, power } => {
            let x = states[horizon - 1][component];
            let mut p = 1.0;
            for _ in 1..power {
                p *= x;
            }
            seeds[horizon - 1][component] = power as f64 * p;
        }
        Functional::AreaAverage => seeds[horizon - 1].iter_mut().for_each(|s| *s = 1.0 / d as f64),
        Functional::WindowMax { component } => {
            // First maximiser, matching the tape's tie rule.
            let mut best = 0;
            for t in 1..horizon {
                if states[t][component] > states[best][component] {
                    best = t;
                }
            }
            seeds[best][component] = 1.0;
        }
    }

    let mut grad = vec![0.0; theta.len()];
    let mut g = vec![0.0; d];
    for t in (0..horizon).rev() {
        for (a, b) in g.iter_mut().zip(&seeds[t]) {
            *a += b;
        }
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        g = mlp::backward(&layout, spec.activation, spec.residual, theta, &traces[t], None, &g, &mut grad);
    }
    (value, grad)
}
