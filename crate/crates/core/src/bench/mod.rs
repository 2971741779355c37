//! Desk-scale scenario suite: Bernoulli survival, a learned toy dynamics
//! model with rollout quantities, and a spring-mass eigenproblem.
//!
//! Scenarios are pure functions of their config and seed. Parallel work goes
//! through an [`Executor`], whose `map` must return results in index order, and
//! wall-clock readings through a [`Clock`]; neither influences the numbers in
//! the report apart from the `timings` list.

mod dynamics;
mod eigen;
mod survival;

use alloc::string::String;
use alloc::vec::Vec;

pub use dynamics::{
    dynamics_qois, gen_dynamics, pairs, run_dynamics, simulate, true_step, DynamicsConfig, DynamicsSplit, Trajectory,
    STATE_DIM,
};
pub use eigen::{run_eigen, EigenConfig};
pub use survival::{
    beta_power_variance, gaussian_power_variance, noisy_block_synthetic, quantile, run_survival, SurvivalConfig,
};

use crate::covariance::SigmaKind;
use crate::error::Result;
use crate::oracles::OracleKind;

/// Runs `f(0..n)` and returns the results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Monotonic seconds.
pub trait Clock: Sync {
    fn now(&self) -> f64;
}

/// Always reads zero; used where timings do not matter.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `stream` of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ScenarioKind {
    Survival,
    Dynamics,
    Eigen,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Survival => "survival",
            ScenarioKind::Dynamics => "dynamics",
            ScenarioKind::Eigen => "eigen",
        }
    }
}

/// A scenario config. Only the section named by `scenario` is used.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScenarioSpec {
    pub scenario: ScenarioKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub survival: SurvivalConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub dynamics: DynamicsConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub eigen: EigenConfig,
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioKind, seed: u64) -> Self {
        Self {
            scenario,
            seed,
            survival: SurvivalConfig::default(),
            dynamics: DynamicsConfig::default(),
            eigen: EigenConfig::default(),
        }
    }
}

/// One row of `report.csv`. Oracle rows carry `oracle_kind` and no error.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub input_id: String,
    pub qoi_id: String,
    pub method: String,
    pub nu: f64,
    pub error: Option<f64>,
    pub sigma_kind: Option<SigmaKind>,
    pub reg: Option<f64>,
    pub oracle_kind: Option<OracleKind>,
}

/// Scores of one method on one QoI over the evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub qoi_id: String,
    pub method: String,
    pub auc: f64,
    pub corr: f64,
    pub loglik: f64,
    pub improvement_auc: f64,
    pub improvement_corr: f64,
    pub improvement_loglik: f64,
    /// Bootstrap standard errors of the three scores.
    pub stderr_auc: f64,
    pub stderr_corr: f64,
    pub stderr_loglik: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Chosen regularizer (Delta) or dropout rate.
    pub hyper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionPoint {
    pub qoi_id: String,
    pub method: String,
    pub fraction_removed: f64,
    pub mean_l1: f64,
}

/// Counted flops per query against the mean improvement over QoIs, with the
/// standard error across QoIs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostQualityPoint {
    pub method: String,
    pub metric: String,
    pub cost: f64,
    pub improvement: f64,
    pub stderr: f64,
}

/// Medians and 95% bands of the survival variance estimates at one `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergencePoint {
    pub qoi_id: String,
    pub n: usize,
    /// Exact variance of `u(θ)` for `θ ~ N(θ_true, θ_true(1 − θ_true)/N)`.
    pub true_var: f64,
    pub delta_var: f64,
    pub ensemble_var: f64,
    /// Median variance under the Beta posterior of a uniform prior.
    pub beta_var: f64,
    /// First-order term `u'(θ_true)² θ_true(1 − θ_true)/N`.
    pub linearized_var: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub ensemble_lo: f64,
    pub ensemble_hi: f64,
}

/// Gaussian-posterior Monte Carlo against the Delta Variance at one `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGapPoint {
    pub n: usize,
    pub delta_var: f64,
    pub mc_var: f64,
    pub mc_stderr: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPoint {
    pub index: usize,
    pub eigenvalue: f64,
    pub delta_var: f64,
    pub mc_var: f64,
    pub mc_stderr: f64,
}

/// Validation objective of the Delta Variance before and after fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunePoint {
    pub qoi_id: String,
    pub untuned: f64,
    pub tuned: f64,
    pub scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub metrics: Vec<MetricSummary>,
    pub retention: Vec<RetentionPoint>,
    pub cost_quality: Vec<CostQualityPoint>,
    pub convergence: Vec<ConvergencePoint>,
    pub posterior_gap: Vec<PosteriorGapPoint>,
    pub eigen: Vec<EigenPoint>,
    pub finetune: Vec<FinetunePoint>,
    /// Selected hyperparameters and other run facts, in a fixed order.
    pub provenance: Vec<(String, f64)>,
    /// Wall-clock measurements; the only nondeterministic part.
    pub timings: Vec<Timing>,
}

impl ScenarioReport {
    pub(crate) fn empty(scenario: ScenarioKind, seed: u64) -> Self {
        Self {
            scenario,
            seed,
            rows: Vec::new(),
            metrics: Vec::new(),
            retention: Vec::new(),
            cost_quality: Vec::new(),
            convergence: Vec::new(),
            posterior_gap: Vec::new(),
            eigen: Vec::new(),
            finetune: Vec::new(),
            provenance: Vec::new(),
            timings: Vec::new(),
        }
    }
}

/// Runs the scenario named by `spec.scenario`.
pub fn run_scenario<E: Executor, C: Clock>(spec: &ScenarioSpec, exec: &E, clock: &C) -> Result<ScenarioReport> {
    match spec.scenario {
        ScenarioKind::Survival => run_survival(&spec.survival, spec.seed, exec),
        ScenarioKind::Dynamics => run_dynamics(&spec.dynamics, spec.seed, exec, clock),
        ScenarioKind::Eigen => run_eigen(&spec.eigen, spec.seed, exec),
    }
}

#[cfg(test)]
mod tests;
