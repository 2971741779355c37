//! Reference baselines for epistemic variance: deep ensembles and post-hoc
//! MC dropout, plus operation counts used to compare inference cost.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::math::sample_variance;
use crate::models::{train, Dataset, DropoutMask, Model, ModelKind, TrainConfig};
use crate::oracles::refit;
use crate::qoi::Qoi;

/// Post-hoc dropout rates searched on validation data (log-spaced, 5e-3 to 0.8).
pub const DROPOUT_RATES: [f64; 14] = [
    0.005, 0.007388, 0.01092, 0.01613, 0.02383, 0.03521, 0.05203, 0.07688, 0.1136, 0.1678, 0.248, 0.3664, 0.5414,
    0.8,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResampleMode {
    /// Members differ only in initialization and batch order.
    #[default]
    InitOnly,
    /// Members additionally train on a bootstrap resample of the data.
    Bootstrap,
}

impl ResampleMode {
    pub fn name(self) -> &'static str {
        match self {
            ResampleMode::InitOnly => "init",
            ResampleMode::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub members: usize,
    pub mode: ResampleMode,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 10,
            mode: ResampleMode::InitOnly,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// Seed of member `k`. Member 0 uses `seed` itself, so a single model trained
/// with the scenario seed doubles as the first member.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Bootstrap counts: how often each of `n` points is drawn in `n` draws.
pub fn bootstrap_counts(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = alloc::vec![0.0; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1.0;
    }
    counts
}

/// Trains ensemble member `k` from a fresh initialization. Split out so
/// callers can train members in parallel.
pub fn train_member(template: &Model, data: &Dataset, cfg: &EnsembleConfig, k: usize) -> Result<Model> {
    let seed = member_seed(cfg.seed, k);
    let init = Model::new(template.kind().clone(), template.d_in(), template.d_out(), seed)?;
    let counts = match cfg.mode {
        ResampleMode::InitOnly => None,
        ResampleMode::Bootstrap => Some(bootstrap_counts(data.len(), seed.wrapping_add(1))),
    };
    match init.kind() {
        // A resample may contain only one outcome, so the rate is taken
        // directly rather than through the interior-only refit.
        ModelKind::BernoulliRate => {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..data.len() {
                let w = counts.as_ref().map_or(1.0, |c| c[i]);
                num += w * data.target(i)[0];
                den += w;
            }
            init.with_theta(alloc::vec![num / den])
        }
        ModelKind::LinearRegression => refit(&init, data, counts.as_deref(), None, &cfg.train),
        _ => {
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            match counts {
                None => Ok(train(&init, data, &tc)?.0),
                Some(c) => {
                    let idx: Vec<usize> = c
                        .iter()
                        .enumerate()
                        .flat_map(|(i, &m)| core::iter::repeat_n(i, m as usize))
                        .collect();
                    Ok(train(&init, &data.subset(&idx), &tc)?.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Model>,
    pub mode: ResampleMode,
}

impl Ensemble {
    pub fn new(members: Vec<Model>, mode: ResampleMode) -> Result<Self> {
        if members.len() < 2 {
            return Err(invalid!("an ensemble needs at least two members, got {}", members.len()));
        }
        let first = &members[0];
        if members
            .iter()
            .any(|m| m.kind() != first.kind() || m.d_in() != first.d_in() || m.d_out() != first.d_out())
        {
            return Err(invalid!("ensemble members must share one architecture"));
        }
        Ok(Self { members, mode })
    }

    /// Trains all members sequentially.
    pub fn train(template: &Model, data: &Dataset, cfg: &EnsembleConfig) -> Result<Self> {
        let members = (0..cfg.members)
            .map(|k| train_member(template, data, cfg, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, cfg.mode)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn values(&self, qoi: &Qoi, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.members.iter().map(|m| qoi.value(m, z)).collect()
    }

    /// Sample variance (denominator K − 1) of the members' predictions.
    pub fn variance(&self, qoi: &Qoi, z: &[Vec<f64>]) -> Result<f64> {
        Ok(sample_variance(&self.values(qoi, z)?))
    }
}

/// Sample variance of `passes` masked evaluations of `u`, each forward pass
/// with its own inverted-dropout mask at `rate`. The masks are applied to an
/// already trained network.
pub fn dropout_variance(model: &Model, qoi: &Qoi, z: &[Vec<f64>], passes: usize, rate: f64, seed: u64) -> Result<f64> {
    Ok(sample_variance(&dropout_values(model, qoi, z, passes, rate, seed)?))
}

pub fn dropout_values(model: &Model, qoi: &Qoi, z: &[Vec<f64>], passes: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(invalid!("dropout rate must lie in (0, 1), got {rate}"));
    }
    if passes < 2 {
        return Err(invalid!("dropout variance needs at least two passes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = DropoutMask::sample(&model.hidden_widths(), rate, &mut rng);
    let mut draw = |m: &mut DropoutMask| m.resample(rate, &mut rng);
    (0..passes).map(|_| qoi.value_with_dropout(model, z, &mut mask, &mut draw)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Delta,
    DeltaFinetuned,
    Ensemble { members: usize },
    Dropout { passes: usize },
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Delta => "delta",
            Method::DeltaFinetuned => "delta-finetuned",
            Method::Ensemble { .. } => "ensemble",
            Method::Dropout { .. } => "dropout",
        }
    }
}

/// What one variance query costs: the model, the forward passes behind one
/// evaluation of `u`, and the shape of Σ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workload {
    pub forward_flops: usize,
    pub forward_calls: usize,
    pub n_params: usize,
    pub sigma_diagonal: bool,
}

impl Workload {
    pub fn new(model: &Model, qoi: &Qoi, z: &[Vec<f64>], sigma_diagonal: bool) -> Self {
        Self {
            forward_flops: model.forward_flops(),
            forward_calls: qoi.forward_calls(z),
            n_params: model.n_params(),
            sigma_diagonal,
        }
    }
}

/// Reverse mode costs about three forward passes per gradient.
pub const GRADIENT_FORWARD_RATIO: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub method: Method,
    /// Training compute relative to one model.
    pub train_factor: f64,
    /// Evaluations of `u` per query.
    pub inference_evaluations: usize,
    /// Gradients of `u` per query.
    pub inference_gradients: usize,
    /// Stored floats relative to one parameter vector.
    pub memory_factor: f64,
    /// Counted floating-point operations per query.
    pub flops: f64,
}

pub fn cost_accounting(method: Method, w: Workload) -> CostReport {
    let eval = (w.forward_flops * w.forward_calls) as f64;
    let p = w.n_params as f64;
    match method {
        Method::Delta | Method::DeltaFinetuned => {
            let quad = if w.sigma_diagonal { 3.0 * p } else { 2.0 * p * p };
            CostReport {
                method,
                train_factor: 1.0,
                inference_evaluations: 0,
                inference_gradients: 1,
                memory_factor: if w.sigma_diagonal { 2.0 } else { 1.0 + p },
                flops: GRADIENT_FORWARD_RATIO * eval + quad,
            }
        }
        Method::Ensemble { members } => CostReport {
            method,
            train_factor: members as f64,
            inference_evaluations: members,
            inference_gradients: 0,
            memory_factor: members as f64,
            flops: members as f64 * eval,
        },
        Method::Dropout { passes } => CostReport {
            method,
            train_factor: 1.0,
            inference_evaluations: passes,
            inference_gradients: 0,
            memory_factor: 1.0,
            flops: passes as f64 * eval,
        },
    }
}

#[cfg(test)]
mod tests;
