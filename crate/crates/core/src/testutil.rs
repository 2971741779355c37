use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{train, Dataset, Model, ModelKind, TrainConfig};

/// `y = Σ (j+1)·xⱼ + noise·N(0,1)`, inputs uniform on [-1, 1].
pub fn linear_data(n: usize, d: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            xs[i * d..(i + 1) * d]
                .iter()
                .enumerate()
                .map(|(j, v)| (j as f64 + 1.0) * v)
                .sum::<f64>()
                + noise * z
        })
        .collect();
    Dataset::from_flat(d, 1, xs, ys).unwrap()
}

pub fn fit_linear(data: &Dataset) -> Model {
    let m = Model::new(ModelKind::LinearRegression, data.d_in(), 1, 0).unwrap();
    train(&m, data, &TrainConfig::default()).unwrap().0
}

/// `k` ones followed by `n - k` zeros.
pub fn bernoulli_data(n: usize, k: usize) -> Dataset {
    let ys: Vec<f64> = (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
    Dataset::outcomes(&ys).unwrap()
}

pub fn bernoulli_at(theta: f64) -> Model {
    Model::new(ModelKind::BernoulliRate, 0, 1, 0)
        .unwrap()
        .with_theta(alloc::vec![theta])
        .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
