use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// `N` rows of inputs (`d_in` wide) and targets (`d_out` wide), stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    d_in: usize,
    d_out: usize,
}

impl Dataset {
    pub fn from_flat(d_in: usize, d_out: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if d_out == 0 {
            return Err(invalid!("datasets need at least one target column"));
        }
        if targets.is_empty() || !targets.len().is_multiple_of(d_out) {
            return Err(invalid!("target buffer of {} values does not hold rows of width {d_out}", targets.len()));
        }
        let n = targets.len() / d_out;
        if inputs.len() != n * d_in {
            return Err(invalid!("expected {} input values for {n} rows of width {d_in}, got {}", n * d_in, inputs.len()));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(invalid!("dataset contains non-finite entries"));
        }
        Ok(Self {
            inputs,
            targets,
            d_in,
            d_out,
        })
    }

    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        if inputs.len() != targets.len() || targets.is_empty() {
            return Err(invalid!("need matching, non-empty input and target rows"));
        }
        let d_in = inputs[0].len();
        let d_out = targets[0].len();
        if inputs.iter().any(|r| r.len() != d_in) || targets.iter().any(|r| r.len() != d_out) {
            return Err(invalid!("ragged rows"));
        }
        Self::from_flat(d_in, d_out, inputs.concat(), targets.concat())
    }

    /// Scalar targets with no input features (e.g. Bernoulli outcomes).
    pub fn outcomes(ys: &[f64]) -> Result<Self> {
        Self::from_flat(0, 1, Vec::new(), ys.to_vec())
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.d_out
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.d_out..(i + 1) * self.d_out]
    }

    pub fn inputs_flat(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets_flat(&self) -> &[f64] {
        &self.targets
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.d_in);
        let mut targets = Vec::with_capacity(indices.len() * self.d_out);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
        }
        Self {
            inputs,
            targets,
            d_in: self.d_in,
            d_out: self.d_out,
        }
    }

    /// Every row except `i`.
    pub fn without(&self, i: usize) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&j| j != i).collect();
        self.subset(&keep)
    }

    /// Every row repeated `times` times (rows of a copy follow the original order).
    pub fn repeated(&self, times: usize) -> Self {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }
}
