//! Scalar abstraction shared by plain `f64` evaluation and taped evaluation.
//!
//! Model forward passes and quantities of interest are written once against
//! [`Real`] and instantiated with `f64` (fast evaluation) or
//! [`Var`](crate::autodiff::Var) (recorded for differentiation).

use core::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;

    /// A constant living in the same evaluation context as `self`.
    fn lift(&self, c: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn pow(self, exponent: Self) -> Self;
    fn powf(self, exponent: f64) -> Self;
    fn max(self, other: Self) -> Self;

    fn sqrt(self) -> Self {
        self.powf(0.5)
    }

    fn square(self) -> Self {
        self * self
    }

    fn abs(self) -> Self {
        self.max(-self)
    }

    /// `ln(1 + e^x)` without overflow for large `x`.
    fn softplus(self) -> Self {
        let positive = self.max(self.lift(0.0));
        let negative_abs = -(self.abs());
        positive + (negative_abs.exp() + 1.0).ln()
    }
}

impl Real for f64 {
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn lift(&self, c: f64) -> Self {
        c
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn sin(self) -> Self {
        libm::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        libm::cos(self)
    }
    #[inline]
    fn pow(self, exponent: Self) -> Self {
        libm::pow(self, exponent)
    }
    #[inline]
    fn powf(self, exponent: f64) -> Self {
        libm::pow(self, exponent)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        libm::fabs(self)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sum of squared deviations, shifted by the first value so that a constant
/// series gives exactly zero.
fn sum_sq_dev(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    let m = xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - x0 - m) * (x - x0 - m)).sum::<f64>()
}

/// Population variance (denominator `n`).
pub(crate) fn population_variance(xs: &[f64]) -> f64 {
    sum_sq_dev(xs) / xs.len() as f64
}

/// Unbiased sample variance (denominator `n - 1`).
pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    sum_sq_dev(xs) / (xs.len() as f64 - 1.0)
}

/// Least-squares slope of `ys` against `xs`.
pub fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}
