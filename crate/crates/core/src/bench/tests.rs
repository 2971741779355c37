use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;

/// Evaluates jobs back to front, then restores index order.
struct Backwards;

impl Executor for Backwards {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let mut out: Vec<T> = (0..n).rev().map(f).collect();
        out.reverse();
        out
    }
}

fn raw_normal_moments(mu: f64, s2: f64, k: usize) -> Vec<f64> {
    // m_j = mu·m_{j-1} + (j-1)·s2·m_{j-2}
    let mut m = vec![1.0, mu];
    for j in 2..=k {
        let next = mu * m[j - 1] + (j as f64 - 1.0) * s2 * m[j - 2];
        m.push(next);
    }
    m
}

fn small_survival() -> SurvivalConfig {
    SurvivalConfig {
        sizes: vec![100, 1000],
        repeats: 12,
        members: 10,
        gap_sizes: vec![1000],
        mc_samples: 20_000,
        ..SurvivalConfig::default()
    }
}

fn small_dynamics() -> DynamicsConfig {
    DynamicsConfig {
        trajectories: 14,
        steps: 20,
        hidden: vec![6],
        train_steps: 150,
        polish_steps: 20,
        learning_rate: 1e-2,
        batch: 16,
        members: 3,
        passes: 4,
        qois: vec![String::from("rollout-mean-h2"), String::from("rollout-pow3-c0-h1")],
        resamples: 20,
        finetune_steps: 20,
        timing_inputs: 2,
        timing_repeats: 1,
        ..DynamicsConfig::default()
    }
}

#[test]
fn seeds_split_into_streams() {
    assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
    assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
}

#[test]
fn gen_dynamics_deterministic_and_sized() {
    let a = gen_dynamics(5, 130, 0.01).unwrap();
    assert_eq!(a, gen_dynamics(5, 130, 0.01).unwrap());
    assert_eq!(a.len(), 130);
    assert_ne!(a, gen_dynamics(6, 130, 0.01).unwrap());
    assert!(gen_dynamics(5, 99, 0.0).is_err());
    assert!(gen_dynamics(5, 200, -1.0).is_err());
}

#[test]
fn noiseless_pairs_follow_true_step() {
    let d = gen_dynamics(1, 100, 0.0).unwrap();
    for i in 0..d.len() {
        let x: [f64; STATE_DIM] = d.input(i).try_into().unwrap();
        let next = true_step(&x);
        for (a, b) in next.iter().zip(d.target(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn true_system_stays_bounded() {
    for traj in simulate(11, 20, 10_000, 0.0) {
        let worst = traj.iter().map(|x| x.iter().map(|v| v.abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        assert!(worst < 10.0, "{worst}");
    }
}

#[test]
fn split_is_by_trajectory() {
    let trajs = simulate(2, 20, 5, 0.0);
    let split = DynamicsSplit::new(trajs.clone()).unwrap();
    assert_eq!((split.train.len(), split.validation.len(), split.evaluation.len()), (14, 3, 3));
    let joined: Vec<Trajectory> = split.train.iter().chain(&split.validation).chain(&split.evaluation).cloned().collect();
    assert_eq!(joined, trajs);
    let tiny = DynamicsSplit::new(simulate(2, 3, 5, 0.0)).unwrap();
    assert_eq!((tiny.train.len(), tiny.validation.len(), tiny.evaluation.len()), (1, 1, 1));
    assert!(DynamicsSplit::new(simulate(2, 2, 5, 0.0)).is_err());
}

#[test]
fn qoi_grid() {
    let q = dynamics_qois(5);
    assert_eq!(q.len(), 15);
    assert_eq!(q[0].id(), "rollout-pow3-c0-h1");
    assert_eq!(q[14].id(), "rollout-max-c2-h5");
}

#[test]
fn gaussian_power_variance_matches_moment_recursion() {
    for &(mu, s2, p) in &[(0.9, 9e-4, 10u32), (0.9, 9e-3, 10), (0.5, 0.01, 3), (-1.2, 0.3, 4)] {
        let m = raw_normal_moments(mu, s2, 2 * p as usize);
        let want = m[2 * p as usize] - m[p as usize] * m[p as usize];
        let got = gaussian_power_variance(mu, s2, p);
        assert!((got - want).abs() <= 1e-9 * want.abs(), "{mu} {s2} {p}: {got} {want}");
    }
    // p = 1 is the variance itself.
    assert!((gaussian_power_variance(3.0, 0.25, 1) - 0.25).abs() < 1e-15);
}

#[test]
fn beta_power_variance_closed_forms() {
    // Var of Beta(2, 3) is ab / ((a+b)²(a+b+1)).
    assert!((beta_power_variance(2.0, 3.0, 1) - 0.04).abs() < 1e-15);
    // E[θ²] = a(a+1)/((a+b)(a+b+1)), E[θ⁴] likewise with four factors.
    let (a, b) = (3.0, 1.0);
    let e2 = a * (a + 1.0) / ((a + b) * (a + b + 1.0));
    let e4 = e2 * (a + 2.0) * (a + 3.0) / ((a + b + 2.0) * (a + b + 3.0));
    assert!((beta_power_variance(a, b, 2) - (e4 - e2 * e2)).abs() < 1e-15);
}

#[test]
fn quantile_interpolates() {
    let v = [4.0, 1.0, 3.0, 2.0];
    assert_eq!(quantile(&v, 0.0), 1.0);
    assert_eq!(quantile(&v, 1.0), 4.0);
    assert_eq!(quantile(&v, 0.5), 2.5);
    assert!(quantile(&[], 0.5).is_nan());
}

#[test]
fn survival_deterministic_across_executors() {
    let cfg = small_survival();
    let a = run_survival(&cfg, 3, &Sequential).unwrap();
    let b = run_survival(&cfg, 3, &Backwards).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2 * 12 * 2 * 2 + 2);
    assert_ne!(a, run_survival(&cfg, 4, &Sequential).unwrap());
}

#[test]
fn survival_estimates_track_exact_variance() {
    let r = run_survival(&small_survival(), 9, &Sequential).unwrap();
    for p in &r.convergence {
        assert!(p.delta_lo <= p.delta_var && p.delta_var <= p.delta_hi);
        let ratio = p.delta_var / p.linearized_var;
        assert!((0.5..2.0).contains(&ratio), "{p:?}");
        let ens = p.ensemble_var / p.true_var;
        assert!((0.2..5.0).contains(&ens), "{p:?}");
    }
    let gap = &r.posterior_gap[0];
    assert!(gap.mc_stderr < 0.05 * gap.mc_var);
    // Second-order term at N = 1000 is about 1.3% of the variance.
    assert!(gap.gap < 0.05 * gap.delta_var, "{gap:?}");
}

#[test]
fn survival_rejects_bad_config() {
    let bad = SurvivalConfig {
        theta_true: 1.0,
        ..small_survival()
    };
    assert!(run_survival(&bad, 0, &Sequential).is_err());
    let empty = SurvivalConfig {
        sizes: vec![0],
        ..small_survival()
    };
    assert!(run_survival(&empty, 0, &Sequential).is_err());
}

#[test]
fn eigen_delta_agrees_with_monte_carlo() {
    let cfg = EigenConfig {
        variance: 1e-3,
        samples: 20_000,
    };
    let r = run_eigen(&cfg, 1, &Sequential).unwrap();
    assert_eq!(r.eigen.len(), 5);
    assert_eq!(r.rows.len(), 10);
    for p in &r.eigen {
        let rel = (p.delta_var - p.mc_var).abs() / p.mc_var;
        assert!(rel < 0.15, "{p:?}");
    }
    assert_eq!(r, run_eigen(&cfg, 1, &Backwards).unwrap());
}

#[test]
fn dynamics_small_run_is_deterministic() {
    let cfg = small_dynamics();
    let a = run_scenario(
        &ScenarioSpec {
            dynamics: cfg.clone(),
            ..ScenarioSpec::new(ScenarioKind::Dynamics, 21)
        },
        &Sequential,
        &NoClock,
    )
    .unwrap();
    let b = run_dynamics(&cfg, 21, &Backwards, &NoClock).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.metrics.len(), 2 * 4);
    assert_eq!(a.finetune.len(), 2);
    assert_eq!(a.cost_quality.len(), 4 * 3);
    let methods: Vec<&str> = a.metrics[..4].iter().map(|m| m.method.as_str()).collect();
    assert_eq!(methods, ["delta", "delta-finetuned", "ensemble", "dropout"]);
    for m in a.metrics.iter().filter(|m| m.method == "ensemble") {
        assert!(m.improvement_auc.abs() < 1e-12 && m.improvement_loglik.abs() < 1e-12);
    }
    assert!(a.rows.iter().all(|r| r.nu >= 0.0 && r.nu.is_finite()));
    assert!(a.provenance.iter().any(|(k, _)| k == "reg.rollout-mean-h2"));
    let labels: Vec<&str> = a.timings.iter().map(|t| t.label.as_str()).collect();
    assert!(labels.contains(&"inference.ensemble"));
}

#[test]
fn dynamics_rejects_bad_config() {
    let short = DynamicsConfig {
        steps: 2,
        qois: vec![String::from("rollout-mean-h3")],
        ..small_dynamics()
    };
    assert!(run_dynamics(&short, 0, &Sequential, &NoClock).is_err());
    let nonrollout = DynamicsConfig {
        qois: vec![String::from("power2")],
        ..small_dynamics()
    };
    assert!(run_dynamics(&nonrollout, 0, &Sequential, &NoClock).is_err());
    let sigma = DynamicsConfig {
        sigma: String::from("laplace"),
        ..small_dynamics()
    };
    assert!(run_dynamics(&sigma, 0, &Sequential, &NoClock).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gaussian_power_variance_nonnegative(mu in -2.0f64..2.0, s2 in 1e-6f64..0.5, p in 1u32..12) {
        let v = gaussian_power_variance(mu, s2, p);
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn quantile_monotone(values in proptest::collection::vec(-10.0f64..10.0, 1..30), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantile(&values, lo) <= quantile(&values, hi));
    }
}
