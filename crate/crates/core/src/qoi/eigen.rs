use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Eigenvalues closer than this to a neighbour count as repeated.
pub const GAP_THRESHOLD: f64 = 1e-8;

/// Chain of `n` masses between two walls joined by `n + 1` springs.
/// `θ = (m₁..m_n, k₁..k_{n+1})` and `A = M⁻¹K` with `M = diag(m)`,
/// `K_ii = k_i + k_{i+1}`, `K_{i,i+1} = K_{i+1,i} = −k_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenProblem {
    pub masses: Vec<f64>,
    pub stiffnesses: Vec<f64>,
}

impl EigenProblem {
    pub fn new(masses: Vec<f64>, stiffnesses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || stiffnesses.len() != masses.len() + 1 {
            return Err(invalid!("need n >= 1 masses and n + 1 stiffnesses"));
        }
        if masses.len() > 64 {
            return Err(invalid!("eigen problems are limited to n <= 64"));
        }
        if masses.iter().chain(&stiffnesses).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid!("masses and stiffnesses must be positive"));
        }
        Ok(Self { masses, stiffnesses })
    }

    /// Five 1 kg masses and stiffnesses 1..6 N/m.
    pub fn five_mass_chain() -> Self {
        Self::new(vec![1.0; 5], (1..=6).map(f64::from).collect()).expect("valid")
    }

    pub fn from_theta(n: usize, theta: &[f64]) -> Result<Self> {
        crate::error::check_len(2 * n + 1, theta.len())?;
        Self::new(theta[..n].to_vec(), theta[n..].to_vec())
    }

    pub fn n(&self) -> usize {
        self.masses.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.masses.clone();
        t.extend_from_slice(&self.stiffnesses);
        t
    }

    pub fn stiffness_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let k = &self.stiffnesses;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = k[i] + k[i + 1];
            if i + 1 < n {
                m[(i, i + 1)] = -k[i + 1];
                m[(i + 1, i)] = -k[i + 1];
            }
        }
        m
    }

    /// `A = M⁻¹ K`.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let mut a = self.stiffness_matrix();
        for i in 0..self.n() {
            for j in 0..self.n() {
                a[(i, j)] /= self.masses[i];
            }
        }
        a
    }

    /// `∂A/∂θ_j` for every parameter, in `θ` order.
    pub fn system_matrix_derivatives(&self) -> Vec<DMatrix<f64>> {
        let n = self.n();
        let k = self.stiffness_matrix();
        let mut out = Vec::with_capacity(2 * n + 1);
        for j in 0..n {
            let mut d = DMatrix::zeros(n, n);
            let m2 = self.masses[j] * self.masses[j];
            for c in 0..n {
                d[(j, c)] = -k[(j, c)] / m2;
            }
            out.push(d);
        }
        for j in 0..=n {
            let mut dk = DMatrix::zeros(n, n);
            if j >= 1 {
                dk[(j - 1, j - 1)] = 1.0;
            }
            if j < n {
                dk[(j, j)] = 1.0;
            }
            if j >= 1 && j < n {
                dk[(j - 1, j)] = -1.0;
                dk[(j, j - 1)] = -1.0;
            }
            for r in 0..n {
                for c in 0..n {
                    dk[(r, c)] /= self.masses[r];
                }
            }
            out.push(dk);
        }
        out
    }
}

/// Ascending eigenvalues of `A` with unit-norm left (`eᵀA = λeᵀ`) and right
/// (`Aê = λê`) eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSolution {
    pub eigenvalues: Vec<f64>,
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
}

/// Solves the chain through the symmetric form `M^{-1/2} K M^{-1/2}`.
pub fn solve_chain(problem: &EigenProblem) -> EigenSolution {
    let n = problem.n();
    let inv_sqrt: Vec<f64> = problem.masses.iter().map(|m| 1.0 / libm::sqrt(*m)).collect();
    let k = problem.stiffness_matrix();
    let s = DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * k[(i, j)] * inv_sqrt[j]);
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let unit = |v: Vec<f64>| {
        let nrm = crate::math::norm(&v);
        v.into_iter().map(|x| x / nrm).collect::<Vec<f64>>()
    };
    let mut sol = EigenSolution {
        eigenvalues: Vec::with_capacity(n),
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
    };
    for idx in order {
        let v = eig.eigenvectors.column(idx);
        sol.eigenvalues.push(eig.eigenvalues[idx]);
        sol.right.push(unit((0..n).map(|i| inv_sqrt[i] * v[i]).collect()));
        sol.left.push(unit((0..n).map(|i| v[i] / inv_sqrt[i]).collect()));
    }
    sol
}

/// `∂λ/∂θ_j = eᵀ (∂A/∂θ_j) ê / (eᵀ ê)`.
pub fn eigenvalue_derivative(left: &[f64], right: &[f64], d_a: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let e = DVector::from_column_slice(left);
    let r = DVector::from_column_slice(right);
    let denom = e.dot(&r);
    if denom.abs() < 1e-300 {
        return Err(Error::Numerical(alloc::string::String::from("left and right eigenvectors are orthogonal")));
    }
    d_a.iter()
        .map(|d| {
            crate::error::check_len(left.len(), d.nrows())?;
            Ok(e.dot(&(d * &r)) / denom)
        })
        .collect()
}

/// `λ_index` (ascending order) and its gradient with respect to `θ`.
pub fn eigenvalue_delta(problem: &EigenProblem, index: usize) -> Result<(f64, Vec<f64>)> {
    let n = problem.n();
    if index >= n {
        return Err(invalid!("eigen index {index} out of range for n = {n}"));
    }
    let sol = solve_chain(problem);
    let lam = &sol.eigenvalues;
    let mut gap = f64::INFINITY;
    if index > 0 {
        gap = gap.min(lam[index] - lam[index - 1]);
    }
    if index + 1 < n {
        gap = gap.min(lam[index + 1] - lam[index]);
    }
    if gap < GAP_THRESHOLD {
        return Err(Error::DegenerateEigenvalue {
            index,
            gap,
            threshold: GAP_THRESHOLD,
        });
    }
    let d = eigenvalue_derivative(&sol.left[index], &sol.right[index], &problem.system_matrix_derivatives())?;
    Ok((lam[index], d))
}

/// Ascending eigenvalues of the chain with parameters `θ`.
pub fn chain_eigenvalues(n: usize, theta: &[f64]) -> Result<Vec<f64>> {
    Ok(solve_chain(&EigenProblem::from_theta(n, theta)?).eigenvalues)
}

#[cfg(test)]
pub(crate) fn degenerate_pair() -> EigenProblem {
    // Identical masses with no middle spring: both modes have λ = 1.
    EigenProblem {
        masses: vec![1.0, 1.0],
        stiffnesses: vec![1.0, 0.0, 1.0],
    }
}
