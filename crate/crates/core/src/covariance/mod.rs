//! Parameter-covariance surrogates Σ and the matrices they are built from.
//!
//! Scaling convention: the empirical Fisher `F̂` is a per-datum mean, the loss
//! Hessian `H` is taken of the summed negative log-likelihood. The covariances
//! are then `F̂⁻¹/N` (Fisher kinds), `H⁻¹` (Laplace) and `N·H⁻¹F̂H⁻¹`
//! (sandwich).

mod ema;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

pub use ema::{ema_diag_fisher, EmaConfig, EmaDiagFisher};

use crate::autodiff::{hessian_of, Block, DENSE_HESSIAN_CAP};
use crate::error::{check_len, invalid, structural, Error, Result};
use crate::math::Real;
use crate::models::{Dataset, Model};

/// Regularizers searched on validation data: `10⁻¹⁵, 10⁻¹⁴, …, 10⁹`.
pub const REGULARIZER_GRID: [f64; 25] = [
    1e-15, 1e-14, 1e-13, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2,
    1e3, 1e4, 1e5, 1e6, 1e7, 1e8, 1e9,
];

/// Smallest eigenvalue accepted as "positive" by [`smallest_stable_regularizer`].
pub const MIN_STABLE_EIGENVALUE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SigmaKind {
    FisherFull,
    FisherDiag,
    FisherEmaDiag,
    Hessian,
    Sandwich,
    Learned,
}

impl SigmaKind {
    pub const ALL: [SigmaKind; 6] = [
        SigmaKind::FisherFull,
        SigmaKind::FisherDiag,
        SigmaKind::FisherEmaDiag,
        SigmaKind::Hessian,
        SigmaKind::Sandwich,
        SigmaKind::Learned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SigmaKind::FisherFull => "fisher-full",
            SigmaKind::FisherDiag => "fisher-diag",
            SigmaKind::FisherEmaDiag => "fisher-ema-diag",
            SigmaKind::Hessian => "hessian",
            SigmaKind::Sandwich => "sandwich",
            SigmaKind::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown sigma kind '{s}'"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherMode {
    Full,
    Diag,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Repr {
    Full(DMatrix<f64>),
    Diagonal(Vec<f64>),
}

impl Repr {
    pub fn dim(&self) -> usize {
        match self {
            Repr::Full(m) => m.nrows(),
            Repr::Diagonal(d) => d.len(),
        }
    }

    fn scaled(&self, c: f64) -> Repr {
        match self {
            Repr::Full(m) => Repr::Full(m * c),
            Repr::Diagonal(d) => Repr::Diagonal(d.iter().map(|v| v * c).collect()),
        }
    }

    /// Dense copy (diagonals expanded).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Repr::Full(m) => m.clone(),
            Repr::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
        }
    }
}

/// Whether the stored matrix is a curvature (`F̂`, `H`) or a covariance Σ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Curvature,
    Covariance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub kind: SigmaKind,
    pub repr: Repr,
    pub role: Role,
    /// Ridge added before the last inversion.
    pub regularizer: f64,
    pub n_points: usize,
    pub blocks: Vec<Block>,
    /// Per-block factors already folded into `repr` (learned kind only).
    pub block_scales: Option<Vec<f64>>,
}

impl CovarianceEstimate {
    pub fn new(kind: SigmaKind, repr: Repr, role: Role, n_points: usize, blocks: Vec<Block>) -> Result<Self> {
        crate::autodiff::validate_layout(&blocks, repr.dim())?;
        if let Repr::Full(m) = &repr {
            if !m.is_square() {
                return Err(invalid!("covariance matrix must be square"));
            }
        }
        Ok(Self {
            kind,
            repr,
            role,
            regularizer: 0.0,
            n_points,
            blocks,
            block_scales: None,
        })
    }

    /// Σ = I over `dim` parameters in a single block.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(
            SigmaKind::FisherDiag,
            Repr::Diagonal(vec![1.0; dim]),
            Role::Covariance,
            1,
            crate::autodiff::default_layout(dim),
        )
    }

    pub fn dim(&self) -> usize {
        self.repr.dim()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, Repr::Diagonal(_))
    }

    /// `vᵀ M v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        check_len(self.dim(), v.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(d) => d.iter().zip(v).map(|(s, x)| s * x * x).sum(),
            Repr::Full(m) => {
                let mut acc = 0.0;
                for j in 0..m.ncols() {
                    if v[j] == 0.0 {
                        continue;
                    }
                    let col = m.column(j);
                    let mut inner = 0.0;
                    for (i, x) in v.iter().enumerate() {
                        inner += col[i] * x;
                    }
                    acc += v[j] * inner;
                }
                acc
            }
        })
    }

    /// `M v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), v.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(d) => d.iter().zip(v).map(|(s, x)| s * x).collect(),
            Repr::Full(m) => (m * nalgebra::DVector::from_column_slice(v)).iter().copied().collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            repr: self.repr.scaled(c),
            ..self.clone()
        }
    }

    /// Smallest eigenvalue of the stored matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        match &self.repr {
            Repr::Diagonal(d) => d.iter().copied().fold(f64::INFINITY, f64::min),
            Repr::Full(m) => SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Checks that every off-block entry vanishes.
    pub fn is_block_diagonal(&self) -> bool {
        let Repr::Full(m) = &self.repr else {
            return true;
        };
        let mut owner = vec![0usize; self.dim()];
        for (b, block) in self.blocks.iter().enumerate() {
            owner[block.range()].iter_mut().for_each(|o| *o = b);
        }
        (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| owner[i] == owner[j] || m[(i, j)] == 0.0))
    }

    /// Folds per-block factors `c_b` into a copy, producing the learned kind.
    pub fn with_block_scales(&self, scales: &[f64]) -> Result<Self> {
        check_len(self.blocks.len(), scales.len())?;
        if scales.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(invalid!("block scales must be positive and finite"));
        }
        if !self.is_block_diagonal() {
            return Err(structural!("block scales need a block-diagonal covariance"));
        }
        let mut factor = vec![1.0; self.dim()];
        for (b, c) in self.blocks.iter().zip(scales) {
            factor[b.range()].iter_mut().for_each(|f| *f = *c);
        }
        let repr = match &self.repr {
            Repr::Diagonal(d) => Repr::Diagonal(d.iter().zip(&factor).map(|(v, f)| v * f).collect()),
            Repr::Full(m) => Repr::Full(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * factor[i])),
        };
        Ok(Self {
            kind: SigmaKind::Learned,
            repr,
            block_scales: Some(scales.to_vec()),
            ..self.clone()
        })
    }
}

/// Per-example `∇_θ log f_θ(xᵢ, yᵢ)` at the current parameters, in data order.
pub fn per_example_grads(model: &Model, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|i| model.loglik_grad(data.input(i), data.target(i)))
        .collect()
}

/// Sums `f(i)` for `i in 0..n` along a fixed pairwise tree, so a parallel caller
/// reproducing the same tree gets identical bits.
pub fn pairwise_sum<T>(n: usize, leaf: &dyn Fn(usize) -> T, add: &dyn Fn(T, T) -> T) -> Option<T> {
    fn go<T>(lo: usize, hi: usize, leaf: &dyn Fn(usize) -> T, add: &dyn Fn(T, T) -> T) -> T {
        if hi - lo == 1 {
            return leaf(lo);
        }
        let mid = lo + (hi - lo) / 2;
        add(go(lo, mid, leaf, add), go(mid, hi, leaf, add))
    }
    (n > 0).then(|| go(0, n, leaf, add))
}

/// `(1/N) Σ g gᵀ` (or its diagonal) from precomputed gradients.
pub fn fisher_from_grads(grads: &[Vec<f64>], mode: FisherMode, blocks: Vec<Block>) -> Result<CovarianceEstimate> {
    let n = grads.len();
    if n == 0 {
        return Err(invalid!("empirical Fisher needs at least one example"));
    }
    let p = grads[0].len();
    if grads.iter().any(|g| g.len() != p) {
        return Err(structural!("per-example gradients have differing lengths"));
    }
    let inv = 1.0 / n as f64;
    let (kind, repr) = match mode {
        FisherMode::Diag => {
            let sum = pairwise_sum(n, &|i| grads[i].iter().map(|g| g * g).collect::<Vec<f64>>(), &|mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            })
            .expect("n > 0");
            (SigmaKind::FisherDiag, Repr::Diagonal(sum.into_iter().map(|v| v * inv).collect()))
        }
        FisherMode::Full => {
            if p > DENSE_HESSIAN_CAP {
                return Err(Error::Resource {
                    what: "dense Fisher dimension",
                    requested: p,
                    cap: DENSE_HESSIAN_CAP,
                });
            }
            let sum = pairwise_sum(
                n,
                &|i| {
                    let g = nalgebra::DVector::from_column_slice(&grads[i]);
                    &g * g.transpose()
                },
                &|a, b| a + b,
            )
            .expect("n > 0");
            (SigmaKind::FisherFull, Repr::Full(sum * inv))
        }
    };
    CovarianceEstimate::new(kind, repr, Role::Curvature, n, blocks)
}

/// Empirical Fisher `F̂ = (1/N) Σᵢ ∇log f(xᵢ) ∇log f(xᵢ)ᵀ` at the model's parameters.
pub fn empirical_fisher(model: &Model, data: &Dataset, mode: FisherMode) -> Result<CovarianceEstimate> {
    if mode == FisherMode::Full && model.n_params() > DENSE_HESSIAN_CAP {
        return Err(Error::Resource {
            what: "dense Fisher dimension",
            requested: model.n_params(),
            cap: DENSE_HESSIAN_CAP,
        });
    }
    let grads = per_example_grads(model, data)?;
    fisher_from_grads(&grads, mode, model.params().blocks().to_vec())
}

/// Hessian of the summed negative log-likelihood at the model's parameters.
pub fn loss_hessian(model: &Model, data: &Dataset) -> Result<CovarianceEstimate> {
    let h = hessian_of(model.theta(), |t| {
        let mut acc = t[0].lift(0.0);
        for i in 0..data.len() {
            acc = acc - model.loglik(t, data.input(i), data.target(i));
        }
        acc
    })?;
    CovarianceEstimate::new(SigmaKind::Hessian, Repr::Full(h), Role::Curvature, data.len(), model.params().blocks().to_vec())
}

/// `(M + reg·I)⁻¹`. Toggles the role between curvature and covariance.
pub fn invert(m: &CovarianceEstimate, reg: f64) -> Result<CovarianceEstimate> {
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(invalid!("regularizer must be finite and >= 0"));
    }
    let repr = match &m.repr {
        Repr::Diagonal(d) => {
            let mut out = Vec::with_capacity(d.len());
            for v in d {
                let s = v + reg;
                if !(s > 0.0) || !(1.0 / s).is_finite() {
                    return Err(Error::Factorization { reg });
                }
                out.push(1.0 / s);
            }
            Repr::Diagonal(out)
        }
        Repr::Full(a) => {
            let mut shifted = a.clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += reg;
            }
            let chol = shifted.cholesky().ok_or(Error::Factorization { reg })?;
            let inv = chol.inverse();
            if inv.iter().any(|v| !v.is_finite()) {
                return Err(Error::Factorization { reg });
            }
            // Symmetrize away rounding so quadratic forms see an exact symmetric matrix.
            Repr::Full((&inv + inv.transpose()) * 0.5)
        }
    };
    Ok(CovarianceEstimate {
        repr,
        role: match m.role {
            Role::Curvature => Role::Covariance,
            Role::Covariance => Role::Curvature,
        },
        regularizer: reg,
        ..m.clone()
    })
}

/// Turns a curvature estimate into Σ following the scaling convention of its kind.
pub fn to_covariance(m: &CovarianceEstimate, reg: f64) -> Result<CovarianceEstimate> {
    if m.role == Role::Covariance {
        return Err(invalid!("{} estimate is already a covariance", m.kind.name()));
    }
    let inv = invert(m, reg)?;
    Ok(match m.kind {
        SigmaKind::FisherFull | SigmaKind::FisherDiag | SigmaKind::FisherEmaDiag | SigmaKind::Learned => {
            inv.scaled(1.0 / m.n_points as f64)
        }
        SigmaKind::Hessian | SigmaKind::Sandwich => inv,
    })
}

/// `N · (H + reg·I)⁻¹ F̂ (H + reg·I)⁻¹`, from a full Hessian and Fisher.
pub fn sandwich_from(h: &CovarianceEstimate, fisher: &CovarianceEstimate, reg: f64) -> Result<CovarianceEstimate> {
    check_len(h.dim(), fisher.dim())?;
    if h.role != Role::Curvature || fisher.role != Role::Curvature {
        return Err(invalid!("sandwich needs raw Hessian and Fisher matrices"));
    }
    let hinv = invert(h, reg)?.repr.to_dense();
    let f = fisher.repr.to_dense();
    let s = &hinv * f * &hinv * h.n_points as f64;
    let s = (&s + s.transpose()) * 0.5;
    Ok(CovarianceEstimate {
        kind: SigmaKind::Sandwich,
        repr: Repr::Full(s),
        role: Role::Covariance,
        regularizer: reg,
        n_points: h.n_points,
        blocks: h.blocks.clone(),
        block_scales: None,
    })
}

pub fn sandwich(model: &Model, data: &Dataset, reg: f64) -> Result<CovarianceEstimate> {
    let h = loss_hessian(model, data)?;
    let f = empirical_fisher(model, data, FisherMode::Full)?;
    sandwich_from(&h, &f, reg)
}

/// Smallest value in `{0} ∪ REGULARIZER_GRID` lifting every eigenvalue of
/// `M + reg·I` to at least [`MIN_STABLE_EIGENVALUE`].
pub fn smallest_stable_regularizer(m: &CovarianceEstimate) -> Result<f64> {
    let lo = m.min_eigenvalue();
    core::iter::once(0.0)
        .chain(REGULARIZER_GRID)
        .find(|reg| lo + reg >= MIN_STABLE_EIGENVALUE)
        .ok_or_else(|| Error::Numerical(alloc::format!("smallest eigenvalue {lo:e} is beyond the regularizer grid")))
}

/// Picks the grid value with the highest validation score. Grid points whose
/// inversion fails are skipped; ties keep the smaller regularizer.
pub fn select_regularizer(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for &reg in grid {
        match score(reg) {
            Ok(s) if s.is_finite() => {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((reg, s));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical(String::from("no regularizer produced a finite score"))))
}

#[cfg(test)]
mod tests;
