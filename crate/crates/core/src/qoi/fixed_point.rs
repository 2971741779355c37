use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{value_and_grad, Tape};
use crate::error::{check_len, invalid, Error, Result};
use crate::math::{norm, Real};

/// Step map `w ↦ F_θ(w)`, written once for every scalar type.
pub trait FixedPointMap {
    fn dim_w(&self) -> usize;
    fn dim_theta(&self) -> usize;
    fn apply<S: Real>(&self, theta: &[S], w: &[S]) -> Vec<S>;
}

/// `F_θ(w) = θ/2 + w/2`; fixed point `w* = θ`.
#[derive(Clone, Copy, Debug)]
pub struct AverageMap;

impl FixedPointMap for AverageMap {
    fn dim_w(&self) -> usize {
        1
    }
    fn dim_theta(&self) -> usize {
        1
    }
    fn apply<S: Real>(&self, theta: &[S], w: &[S]) -> Vec<S> {
        vec![theta[0] * 0.5 + w[0] * 0.5]
    }
}

/// `F_θ(w) = cos(θ w)`.
#[derive(Clone, Copy, Debug)]
pub struct CosMap;

impl FixedPointMap for CosMap {
    fn dim_w(&self) -> usize {
        1
    }
    fn dim_theta(&self) -> usize {
        1
    }
    fn apply<S: Real>(&self, theta: &[S], w: &[S]) -> Vec<S> {
        vec![(theta[0] * w[0]).cos()]
    }
}

/// `F_θ(w) = A w + b θ` with scalar `θ`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl FixedPointMap for AffineMap {
    fn dim_w(&self) -> usize {
        self.b.len()
    }
    fn dim_theta(&self) -> usize {
        1
    }
    fn apply<S: Real>(&self, theta: &[S], w: &[S]) -> Vec<S> {
        (0..self.b.len())
            .map(|i| {
                let mut acc = theta[0] * self.b[i];
                for (j, wj) in w.iter().enumerate() {
                    acc = acc + *wj * self.a[(i, j)];
                }
                acc
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointSpec {
    pub w0: Vec<f64>,
    /// Stop when `‖F(w) − w‖ ≤ tol`.
    pub tol: f64,
    pub max_iters: usize,
    /// Coordinate of `w*` reported as the scalar quantity.
    pub output: usize,
}

impl FixedPointSpec {
    pub fn new(w0: Vec<f64>) -> Self {
        Self {
            w0,
            tol: 1e-12,
            max_iters: 100_000,
            output: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointSolution {
    pub w: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn check<M: FixedPointMap>(map: &M, theta: &[f64], spec: &FixedPointSpec) -> Result<()> {
    check_len(map.dim_theta(), theta.len())?;
    check_len(map.dim_w(), spec.w0.len())?;
    if spec.output >= map.dim_w() {
        return Err(invalid!("output coordinate {} out of range", spec.output));
    }
    Ok(())
}

pub fn solve_fixed_point<M: FixedPointMap>(map: &M, theta: &[f64], spec: &FixedPointSpec) -> Result<FixedPointSolution> {
    check(map, theta, spec)?;
    let mut w = spec.w0.clone();
    let mut residual = f64::INFINITY;
    for it in 0..=spec.max_iters {
        let next = map.apply(theta, &w);
        let diff: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a - b).collect();
        residual = norm(&diff);
        if !residual.is_finite() {
            break;
        }
        if residual <= spec.tol {
            return Ok(FixedPointSolution {
                w,
                iterations: it,
                residual,
            });
        }
        w = next;
    }
    Err(Error::NonConvergence {
        iterations: spec.max_iters,
        residual,
    })
}

/// `∇_θ w*[output] = [(I − ∇_w F)⁻¹ ∇_θ F]_output` at the converged fixed point.
pub fn implicit_delta<M: FixedPointMap>(map: &M, theta: &[f64], spec: &FixedPointSpec) -> Result<(f64, Vec<f64>)> {
    let sol = solve_fixed_point(map, theta, spec)?;
    let (nw, nt) = (map.dim_w(), map.dim_theta());
    let mut jw = DMatrix::zeros(nw, nw);
    let mut jt = DMatrix::zeros(nw, nt);
    let tape = Tape::new();
    let tv = tape.inputs(theta);
    let wv = tape.inputs(&sol.w);
    let out = map.apply(&tv, &wv);
    let mut all = tv.clone();
    all.extend_from_slice(&wv);
    for (i, fi) in out.iter().enumerate() {
        let g = tape.gradient(*fi, &all)?;
        for j in 0..nt {
            jt[(i, j)] = g[j];
        }
        for j in 0..nw {
            jw[(i, j)] = g[nt + j];
        }
    }
    // Solve (I − J_w)ᵀ y = e_out, then Δ = J_θᵀ y.
    let system = (DMatrix::identity(nw, nw) - jw).transpose();
    let mut e = DVector::zeros(nw);
    e[spec.output] = 1.0;
    let y = system
        .lu()
        .solve(&e)
        .filter(|y| y.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical(alloc::string::String::from("I - dF/dw is singular at the fixed point")))?;
    let delta = jt.transpose() * y;
    Ok((sol.w[spec.output], delta.iter().copied().collect()))
}

/// Tape gradient of `steps` unrolled iterations from `w0`.
pub fn unrolled_delta<M: FixedPointMap>(map: &M, theta: &[f64], spec: &FixedPointSpec, steps: usize) -> Result<(f64, Vec<f64>)> {
    check(map, theta, spec)?;
    value_and_grad(theta, |t| {
        let mut w: Vec<_> = spec.w0.iter().map(|v| t[0].lift(*v)).collect();
        for _ in 0..steps {
            w = map.apply(t, &w);
        }
        w[spec.output]
    })
}
