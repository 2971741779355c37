use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::{derive_seed, EigenPoint, Executor, ReportRow, ScenarioKind, ScenarioReport};
use crate::baselines::Method;
use crate::error::{invalid, Error, Result};
use crate::math::dot;
use crate::oracles::{gaussian_posterior_mc, OracleKind};
use crate::qoi::{chain_eigenvalues, eigenvalue_delta, EigenProblem};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EigenConfig {
    /// Isotropic perturbation variance of every mass and stiffness.
    pub variance: f64,
    pub samples: usize,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            variance: 1e-2,
            samples: 100_000,
        }
    }
}

/// Five-mass chain: Delta Variance `σ²‖Δ‖²` of each eigenvalue against plain
/// Monte Carlo over `θ ~ N(θ̄, σ²I)`. All eigenvalues share the same draws.
pub fn run_eigen<E: Executor>(cfg: &EigenConfig, seed: u64, exec: &E) -> Result<ScenarioReport> {
    if !(cfg.variance > 0.0 && cfg.variance.is_finite()) {
        return Err(invalid!("perturbation variance must be positive"));
    }
    let problem = EigenProblem::five_mass_chain();
    let theta = problem.theta();
    let cov = DMatrix::identity(theta.len(), theta.len()) * cfg.variance;
    let mc_seed = derive_seed(seed, 1);
    let points: Vec<Result<EigenPoint>> = exec.map(problem.n(), |index| {
        let (eigenvalue, d) = eigenvalue_delta(&problem, index)?;
        let u = |t: &[f64]| chain_eigenvalues(problem.n(), t).map_or(f64::NAN, |l| l[index]);
        let mc = gaussian_posterior_mc(&u, &theta, &cov, cfg.samples, mc_seed)?;
        if !mc.estimate.is_finite() {
            return Err(Error::Numerical(format!("eigenvalue {index} failed on a perturbed draw")));
        }
        Ok(EigenPoint {
            index,
            eigenvalue,
            delta_var: cfg.variance * dot(&d, &d),
            mc_var: mc.estimate,
            mc_stderr: mc.stderr,
        })
    });
    let mut report = ScenarioReport::empty(ScenarioKind::Eigen, seed);
    for p in points {
        let p = p.map_err(|e| Error::Scenario {
            scenario: "eigen",
            source: alloc::boxed::Box::new(e),
        })?;
        let qoi_id = format!("eigen{}", p.index);
        report.rows.push(ReportRow {
            input_id: String::from("chain5"),
            qoi_id: qoi_id.clone(),
            method: String::from(Method::Delta.name()),
            nu: p.delta_var,
            error: None,
            sigma_kind: None,
            reg: None,
            oracle_kind: None,
        });
        report.rows.push(ReportRow {
            input_id: String::from("chain5"),
            qoi_id,
            method: String::from("oracle"),
            nu: p.mc_var,
            error: None,
            sigma_kind: None,
            reg: None,
            oracle_kind: Some(OracleKind::PosteriorMc),
        });
        report.eigen.push(p);
    }
    report.provenance.push((String::from("variance"), cfg.variance));
    report.provenance.push((String::from("samples"), cfg.samples as f64));
    Ok(report)
}
