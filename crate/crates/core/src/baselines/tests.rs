use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::{Activation, MlpSpec};
use crate::testutil::{bernoulli_data, linear_data, rel_err};

fn tiny_mlp() -> Model {
    let spec = MlpSpec {
        hidden: vec![8, 8],
        activation: Activation::Tanh,
        dropout: 0.0,
        residual: true,
    };
    Model::new(ModelKind::Mlp(spec), 2, 2, 0).unwrap()
}

fn tiny_dynamics() -> Dataset {
    let xs: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let t = i as f64 * 0.15;
            vec![libm::sin(t), libm::cos(t)]
        })
        .collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.9 * x[0] + 0.1 * x[1], 0.9 * x[1] - 0.1 * x[0]]).collect();
    Dataset::from_rows(&xs, &ys).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        steps: 300,
        polish_steps: 50,
        learning_rate: 1e-2,
        batch: 8,
        grad_tol: 1e-6,
        ..TrainConfig::default()
    }
}

#[test]
fn first_member_uses_scenario_seed() {
    assert_eq!(member_seed(42, 0), 42);
    assert_ne!(member_seed(42, 1), member_seed(42, 2));
}

#[test]
fn bootstrap_bernoulli_matches_binomial_variance() {
    // Var of the resampled rate is θ̂(1 − θ̂)/N.
    let data = bernoulli_data(200, 150);
    let cfg = EnsembleConfig {
        members: 2000,
        mode: ResampleMode::Bootstrap,
        seed: 3,
        train: TrainConfig::default(),
    };
    let ens = Ensemble::train(&Model::new(ModelKind::BernoulliRate, 0, 1, 0).unwrap(), &data, &cfg).unwrap();
    let v = ens.variance(&Qoi::power(1.0), &[vec![]]).unwrap();
    assert!(rel_err(v, 0.75 * 0.25 / 200.0) < 0.1, "{v}");
}

#[test]
fn bootstrap_allows_boundary_rate() {
    let data = bernoulli_data(5, 5);
    let cfg = EnsembleConfig {
        members: 3,
        mode: ResampleMode::Bootstrap,
        ..EnsembleConfig::default()
    };
    let ens = Ensemble::train(&Model::new(ModelKind::BernoulliRate, 0, 1, 0).unwrap(), &data, &cfg).unwrap();
    assert!(ens.members.iter().all(|m| m.theta()[0] == 1.0));
    assert_eq!(ens.variance(&Qoi::power(10.0), &[vec![]]).unwrap(), 0.0);
}

#[test]
fn init_only_convex_members_agree() {
    let data = linear_data(50, 2, 0.5, 1);
    let cfg = EnsembleConfig {
        members: 4,
        ..EnsembleConfig::default()
    };
    let ens = Ensemble::train(&Model::new(ModelKind::LinearRegression, 2, 1, 0).unwrap(), &data, &cfg).unwrap();
    let v = ens.variance(&Qoi::power(1.0), &[vec![0.3, 0.4]]).unwrap();
    assert!(v < 1e-24, "{v}");
}

#[test]
fn mlp_members_differ_and_are_reproducible() {
    let data = tiny_dynamics();
    let cfg = EnsembleConfig {
        members: 3,
        train: quick_train(),
        ..EnsembleConfig::default()
    };
    let a = Ensemble::train(&tiny_mlp(), &data, &cfg).unwrap();
    let b = Ensemble::train(&tiny_mlp(), &data, &cfg).unwrap();
    assert_eq!(a, b);
    let q = Qoi::parse("rollout-mean-h3").unwrap();
    assert!(a.variance(&q, &[vec![0.2, 0.5]]).unwrap() > 0.0);
    let single = train_member(&tiny_mlp(), &data, &cfg, 1).unwrap();
    assert_eq!(single, a.members[1]);
}

#[test]
fn ensemble_validation() {
    let m = tiny_mlp();
    assert!(Ensemble::new(vec![m.clone()], ResampleMode::InitOnly).is_err());
    let other = Model::new(ModelKind::LinearRegression, 2, 1, 0).unwrap();
    assert!(Ensemble::new(vec![m, other], ResampleMode::InitOnly).is_err());
}

#[test]
fn keep_all_mask_reproduces_plain_value() {
    let m = tiny_mlp();
    let z = [vec![0.1, -0.4]];
    let q = Qoi::parse("rollout-pow2-c1-h4").unwrap();
    let mut all = DropoutMask {
        keep: m.hidden_widths().iter().map(|&w| vec![true; w]).collect(),
        scale: 1.0,
    };
    let got = q.value_with_dropout(&m, &z, &mut all, &mut |_| {}).unwrap();
    assert_eq!(got, q.value(&m, &z).unwrap());
    assert_eq!(got, q.eval(&m, m.theta(), &z));
}

#[test]
fn masks_drop_at_the_requested_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rate in [0.02, 0.1, 0.5] {
        let mut m = DropoutMask::sample(&[7, 32, 1], rate, &mut rng);
        let (mut dropped, mut total) = (0usize, 0usize);
        let mut per_unit = vec![0usize; 40];
        for _ in 0..4000 {
            m.resample(rate, &mut rng);
            for (u, k) in m.keep.iter().flatten().enumerate() {
                dropped += usize::from(!k);
                per_unit[u] += usize::from(!k);
            }
            total += 40;
        }
        let frac = dropped as f64 / total as f64;
        assert!((frac - rate).abs() < 4.0 * (rate * (1.0 - rate) / total as f64).sqrt(), "{rate} {frac}");
        // Layer edges get no special treatment.
        for (u, &c) in per_unit.iter().enumerate() {
            let f = c as f64 / 4000.0;
            assert!((f - rate).abs() < 5.0 * (rate * (1.0 - rate) / 4000.0).sqrt(), "{rate} unit {u}: {f}");
        }
        assert_eq!(m.scale, 1.0 / (1.0 - rate));
    }
    let mut none = DropoutMask::sample(&[5], 0.0, &mut rng);
    none.resample(0.0, &mut rng);
    assert!(none.keep[0].iter().all(|&k| k));
}

#[test]
fn masked_fast_path_matches_generic_forward() {
    let m = tiny_mlp();
    let q = Qoi::parse("rollout-max-c0-h3").unwrap();
    let z = [vec![0.3, -0.2]];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fixed = DropoutMask::sample(&m.hidden_widths(), 0.4, &mut rng);
    let mut mask = fixed.clone();
    let got = q.value_with_dropout(&m, &z, &mut mask, &mut |_| {}).unwrap();
    let mut x = z[0].clone();
    let mut best = f64::NEG_INFINITY;
    for _ in 0..3 {
        x = m.forward(m.theta(), &x, Some(&fixed));
        best = best.max(x[0]);
    }
    assert!((got - best).abs() <= 1e-14 * best.abs().max(1.0), "{got} {best}");
}

#[test]
fn fresh_mask_per_rollout_step() {
    let m = tiny_mlp();
    let q = Qoi::parse("rollout-mean-h5").unwrap();
    let mut mask = DropoutMask {
        keep: m.hidden_widths().iter().map(|&w| vec![true; w]).collect(),
        scale: 1.0,
    };
    let mut draws = 0;
    q.value_with_dropout(&m, &[vec![0.0, 0.0]], &mut mask, &mut |_| draws += 1).unwrap();
    assert_eq!(draws, 5);
    let mut short = DropoutMask {
        keep: vec![vec![true; 1]],
        scale: 1.0,
    };
    assert!(q.value_with_dropout(&m, &[vec![0.0, 0.0]], &mut short, &mut |_| {}).is_err());
}

#[test]
fn dropout_variance_behaviour() {
    let m = tiny_mlp();
    let z = [vec![0.3, 0.2]];
    let q = Qoi::parse("rollout-mean-h2").unwrap();
    let a = dropout_variance(&m, &q, &z, 50, 0.1, 9).unwrap();
    assert_eq!(a, dropout_variance(&m, &q, &z, 50, 0.1, 9).unwrap());
    assert!(a > 0.0);
    let low = dropout_variance(&m, &q, &z, 200, DROPOUT_RATES[0], 1).unwrap();
    let high = dropout_variance(&m, &q, &z, 200, 0.5, 1).unwrap();
    assert!(low < high, "{low} {high}");
}

#[test]
fn dropout_rejects_bad_input() {
    let m = tiny_mlp();
    let z = [vec![0.3, 0.2]];
    let q = Qoi::parse("rollout-mean-h2").unwrap();
    assert!(dropout_variance(&m, &q, &z, 10, 0.0, 0).is_err());
    assert!(dropout_variance(&m, &q, &z, 10, 1.0, 0).is_err());
    assert!(dropout_variance(&m, &q, &z, 1, 0.5, 0).is_err());
    let lin = Model::new(ModelKind::LinearRegression, 2, 1, 0).unwrap();
    assert!(dropout_variance(&lin, &Qoi::power(1.0), &[vec![1.0, 1.0]], 10, 0.5, 0).is_err());
}

#[test]
fn dropout_rates_are_log_spaced() {
    assert_eq!(DROPOUT_RATES.len(), 14);
    assert_eq!(DROPOUT_RATES[0], 5e-3);
    assert_eq!(DROPOUT_RATES[13], 0.8);
    let ratios: Vec<f64> = DROPOUT_RATES.windows(2).map(|w| w[1] / w[0]).collect();
    assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 2e-3), "{ratios:?}");
}

#[test]
fn cost_table_shape() {
    let m = tiny_mlp();
    let q = Qoi::parse("rollout-mean-h5").unwrap();
    let w = Workload::new(&m, &q, &[vec![0.0, 0.0]], true);
    assert_eq!(w.forward_calls, 5);
    let delta = cost_accounting(Method::Delta, w);
    let ens = cost_accounting(Method::Ensemble { members: 10 }, w);
    let drop = cost_accounting(Method::Dropout { passes: 10 }, w);
    assert_eq!((delta.train_factor, ens.train_factor, drop.train_factor), (1.0, 10.0, 1.0));
    assert_eq!((delta.memory_factor, ens.memory_factor, drop.memory_factor), (2.0, 10.0, 1.0));
    assert_eq!((delta.inference_gradients, delta.inference_evaluations), (1, 0));
    assert_eq!(ens.inference_evaluations, 10);
    assert!(delta.flops < drop.flops);
    assert_eq!(drop.flops, ens.flops);
    let full = cost_accounting(Method::Delta, Workload { sigma_diagonal: false, ..w });
    assert_eq!(full.memory_factor, 1.0 + m.n_params() as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bootstrap_counts_sum_to_n(n in 1usize..300, seed in any::<u64>()) {
        let c = bootstrap_counts(n, seed);
        prop_assert_eq!(c.len(), n);
        prop_assert_eq!(c.iter().sum::<f64>(), n as f64);
    }

    #[test]
    fn dropout_variance_nonnegative(rate in 0.01f64..0.9, seed in any::<u64>(), x in -1.0f64..1.0) {
        let v = dropout_variance(&tiny_mlp(), &Qoi::parse("rollout-max-c0-h3").unwrap(), &[vec![x, -x]], 8, rate, seed).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn ensemble_variance_permutation_invariant(k in 60usize..140, seed in any::<u64>(), shift in 0usize..10) {
        let cfg = EnsembleConfig { members: 10, mode: ResampleMode::Bootstrap, seed, train: TrainConfig::default() };
        let ens = Ensemble::train(&Model::new(ModelKind::BernoulliRate, 0, 1, 0).unwrap(), &bernoulli_data(150, k), &cfg).unwrap();
        let mut members = ens.members.clone();
        members.rotate_left(shift);
        members.reverse();
        let q = Qoi::power(10.0);
        let a = ens.variance(&q, &[vec![]]).unwrap();
        let b = Ensemble::new(members, cfg.mode).unwrap().variance(&q, &[vec![]]).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }
}
