use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eigen::degenerate_pair;
use super::*;
use crate::error::Error;
use crate::models::{Activation, MlpSpec};
use crate::testutil::{bernoulli_at, rel_err};

fn fd_grad(theta: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|j| {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut p = theta.to_vec();
            p[j] += h;
            let up = f(&p);
            p[j] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    crate::math::norm(&diff) / crate::math::norm(b).max(1e-300)
}

fn small_mlp(seed: u64, act: Activation) -> Model {
    let spec = MlpSpec {
        hidden: vec![6, 5],
        activation: act,
        dropout: 0.0,
        residual: true,
    };
    Model::new(ModelKind::Mlp(spec), 2, 2, seed).unwrap()
}

#[test]
fn power_on_bernoulli() {
    let m = bernoulli_at(0.9);
    let (v, d) = Qoi::power(10.0).value_and_delta(&m, &[vec![]]).unwrap();
    assert!(rel_err(v, 0.9f64.powi(10)) < 1e-14);
    assert!(rel_err(d[0], 10.0 * 0.9f64.powi(9)) < 1e-13);
}

#[test]
fn set_product_matches_fd() {
    let m = Model::new(ModelKind::LinearRegression, 2, 1, 0)
        .unwrap()
        .with_theta(vec![0.3, -0.7])
        .unwrap();
    let z = vec![vec![0.5, 0.2], vec![-1.0, 0.4], vec![0.9, 0.9]];
    let q = Qoi::new(QoiKind::SetProduct).unwrap();
    let (_, d) = q.value_and_delta(&m, &z).unwrap();
    let fd = fd_grad(m.theta(), &|t| q.eval(&m, t, &z));
    assert!(vec_rel_err(&d, &fd) < 1e-6);
}

#[test]
fn rollout_bptt_matches_tape() {
    let m = small_mlp(3, Activation::Tanh);
    let z = vec![vec![0.4, -0.3]];
    for id in ["rollout-pow2-c0-h5", "rollout-mean-h7", "rollout-max-c1-h6", "rollout-pow3-c1-h1"] {
        let q = Qoi::parse(id).unwrap();
        let (v1, d1) = q.value_and_delta(&m, &z).unwrap();
        let (v2, d2) = q.value_and_delta_tape(&m, &z).unwrap();
        assert!((v1 - v2).abs() <= 1e-14 * v2.abs().max(1.0), "{id}");
        assert!(vec_rel_err(&d1, &d2) < 1e-12, "{id}");
    }
}

#[test]
fn randomized_fd_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids = ["rollout-pow2-c0-h4", "rollout-mean-h3", "rollout-max-c0-h5", "power3"];
    let mut checked = 0;
    for case in 0..120 {
        let act = if case % 3 == 0 { Activation::Relu } else { Activation::Tanh };
        let m = small_mlp(case, act);
        let z = vec![vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]];
        let q = Qoi::parse(ids[case as usize % ids.len()]).unwrap();
        let (_, d) = q.value_and_delta(&m, &z).unwrap();
        let fd = fd_grad(m.theta(), &|t| q.eval(&m, t, &z));
        let err = vec_rel_err(&d, &fd);
        assert!(err <= 1e-5, "case {case}: {err}");
        checked += 1;
    }
    assert!(checked >= 100);
}

#[test]
fn ids_roundtrip() {
    for id in [
        "power10",
        "power0.5",
        "set-product",
        "rollout-pow2-c1-h10",
        "rollout-mean-h3",
        "rollout-max-c0-h50",
    ] {
        assert_eq!(Qoi::parse(id).unwrap().id(), id);
    }
    for bad in ["", "power", "rollout-pow0-c0-h1", "rollout-mean-h0", "rollout-max-h3", "volume"] {
        assert!(Qoi::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let m = small_mlp(0, Activation::Tanh);
    let q = Qoi::parse("rollout-max-c5-h2").unwrap();
    assert!(q.value(&m, &[vec![0.0, 0.0]]).is_err());
    assert!(Qoi::power(2.0).value(&m, &[vec![0.0]]).is_err());
    assert!(Qoi::power(2.0).value(&m, &[vec![0.0, 0.0], vec![0.0, 0.0]]).is_err());
}

#[test]
fn window_max_tie_keeps_first() {
    let states = vec![vec![1.0], vec![3.0], vec![3.0], vec![2.0]];
    assert_eq!(apply_functional(Functional::WindowMax { component: 0 }, &states), 3.0);
}

#[test]
fn average_map_delta_is_one() {
    let (w, d) = implicit_delta(&AverageMap, &[2.5], &FixedPointSpec::new(vec![0.0])).unwrap();
    assert!((w - 2.5).abs() < 1e-11);
    assert!((d[0] - 1.0).abs() < 1e-12);
}

#[test]
fn cos_map_matches_fd() {
    let spec = FixedPointSpec::new(vec![0.5]);
    let theta = 0.8;
    let (_, d) = implicit_delta(&CosMap, &[theta], &spec).unwrap();
    let f = |t: f64| solve_fixed_point(&CosMap, &[t], &spec).unwrap().w[0];
    let h = 1e-5;
    let fd = (f(theta + h) - f(theta - h)) / (2.0 * h);
    assert!(rel_err(d[0], fd) < 1e-5);
}

#[test]
fn affine_map_closed_form() {
    let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
    let b = vec![1.0, -0.5];
    let map = AffineMap { a: a.clone(), b: b.clone() };
    let expected = (DMatrix::identity(2, 2) - a).try_inverse().unwrap() * nalgebra::DVector::from_vec(b);
    for out in 0..2 {
        let mut spec = FixedPointSpec::new(vec![0.0, 0.0]);
        spec.output = out;
        let (w, d) = implicit_delta(&map, &[2.0], &spec).unwrap();
        assert!((w - 2.0 * expected[out]).abs() < 1e-10);
        assert!((d[0] - expected[out]).abs() < 1e-12);
    }
}

#[test]
fn unrolled_agrees_with_implicit() {
    let spec = FixedPointSpec::new(vec![0.5]);
    let (_, imp) = implicit_delta(&CosMap, &[0.8], &spec).unwrap();
    let (_, unr) = unrolled_delta(&CosMap, &[0.8], &spec, 200).unwrap();
    assert!((imp[0] - unr[0]).abs() < 1e-4);
}

#[test]
fn fixed_point_non_convergence() {
    // w ↦ 2w + θ diverges from any w0 ≠ −θ.
    let map = AffineMap {
        a: DMatrix::from_element(1, 1, 2.0),
        b: vec![1.0],
    };
    let mut spec = FixedPointSpec::new(vec![1.0]);
    spec.max_iters = 50;
    assert!(matches!(implicit_delta(&map, &[1.0], &spec), Err(Error::NonConvergence { .. })));
}

#[test]
fn single_mass_eigenvalue() {
    // λ = (k₁ + k₂)/m.
    let p = EigenProblem::new(vec![2.0], vec![1.0, 3.0]).unwrap();
    let (lam, d) = eigenvalue_delta(&p, 0).unwrap();
    assert!((lam - 2.0).abs() < 1e-14);
    assert!((d[0] + 1.0).abs() < 1e-14);
    assert!((d[1] - 0.5).abs() < 1e-14);
    assert!((d[2] - 0.5).abs() < 1e-14);
}

#[test]
fn five_mass_chain_shape() {
    let p = EigenProblem::five_mass_chain();
    assert_eq!(p.theta().len(), 11);
    let sol = solve_chain(&p);
    assert_eq!(sol.eigenvalues.len(), 5);
    assert!(sol.eigenvalues.windows(2).all(|w| w[0] < w[1]));
    let a = p.system_matrix();
    for (i, lam) in sol.eigenvalues.iter().enumerate() {
        let r = nalgebra::DVector::from_vec(sol.right[i].clone());
        let e = nalgebra::DVector::from_vec(sol.left[i].clone());
        assert!((&a * &r - &r * *lam).norm() < 1e-10);
        assert!((a.transpose() * &e - &e * *lam).norm() < 1e-10);
    }
}

#[test]
fn eigen_delta_matches_fd() {
    let p = EigenProblem::five_mass_chain();
    for idx in 0..5 {
        let (_, d) = eigenvalue_delta(&p, idx).unwrap();
        let fd = fd_grad(&p.theta(), &|t| chain_eigenvalues(5, t).unwrap()[idx]);
        assert!(vec_rel_err(&d, &fd) <= 1e-5, "index {idx}");
    }
}

#[test]
fn degenerate_eigenvalue_is_reported() {
    let p = degenerate_pair();
    assert!(matches!(eigenvalue_delta(&p, 0), Err(Error::DegenerateEigenvalue { .. })));
    assert!(eigenvalue_delta(&EigenProblem::five_mass_chain(), 5).is_err());
}

#[test]
fn eigen_delta_variance_matches_mc() {
    let p = EigenProblem::five_mass_chain();
    let theta = p.theta();
    let sd = 1e-2;
    let (_, d) = eigenvalue_delta(&p, 2).unwrap();
    let predicted: f64 = d.iter().map(|g| g * g * sd * sd).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let t: Vec<f64> = theta
                .iter()
                .map(|v| v + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            chain_eigenvalues(5, &t).unwrap()[2]
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(rel_err(var, predicted) < 0.15, "{var} vs {predicted}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn power_delta_closed_form(theta in 0.05f64..0.95, p in 0.5f64..12.0) {
        let (v, d) = Qoi::power(p).value_and_delta(&bernoulli_at(theta), &[vec![]]).unwrap();
        prop_assert!(rel_err(v, theta.powf(p)) < 1e-12);
        prop_assert!(rel_err(d[0], p * theta.powf(p - 1.0)) < 1e-12);
    }

    #[test]
    fn chain_eigen_delta_fd(ms in proptest::collection::vec(0.5f64..2.0, 3), ks in proptest::collection::vec(0.5f64..3.0, 4)) {
        let p = EigenProblem::new(ms, ks).unwrap();
        let theta = p.theta();
        for idx in 0..3 {
            match eigenvalue_delta(&p, idx) {
                Ok((_, d)) => {
                    let fd = fd_grad(&theta, &|t| chain_eigenvalues(3, t).unwrap()[idx]);
                    prop_assert!(vec_rel_err(&d, &fd) <= 1e-5);
                }
                Err(Error::DegenerateEigenvalue { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(alloc::format!("{e}"))),
            }
        }
    }
}
