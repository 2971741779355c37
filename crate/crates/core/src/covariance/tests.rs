use super::*;
use crate::models::ModelKind;
use crate::testutil::{bernoulli_at, bernoulli_data, fit_linear, linear_data, rel_err};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DVector;
use proptest::prelude::*;

fn scalar(e: &CovarianceEstimate) -> f64 {
    match &e.repr {
        Repr::Diagonal(d) => d[0],
        Repr::Full(m) => m[(0, 0)],
    }
}

#[test]
fn bernoulli_fisher_is_analytic() {
    let (n, k) = (100, 90);
    let theta = k as f64 / n as f64;
    let m = bernoulli_at(theta);
    let f = empirical_fisher(&m, &bernoulli_data(n, k), FisherMode::Full).unwrap();
    assert!(rel_err(scalar(&f), 1.0 / (theta * (1.0 - theta))) < 1e-12);
    assert_eq!(f.role, Role::Curvature);
    assert_eq!(f.n_points, n);
}

#[test]
fn single_point_fisher_is_rank_one() {
    let data = linear_data(1, 3, 1.0, 2);
    let m = Model::new(ModelKind::LinearRegression, 3, 1, 0)
        .unwrap()
        .with_theta(vec![0.1, 0.2, 0.3])
        .unwrap();
    let g = DVector::from_vec(m.loglik_grad(data.input(0), data.target(0)).unwrap());
    let f = empirical_fisher(&m, &data, FisherMode::Full).unwrap();
    assert_eq!(f.repr.to_dense(), &g * g.transpose());
    let ev = SymmetricEigen::new(f.repr.to_dense()).eigenvalues;
    let nonzero = ev.iter().filter(|v| v.abs() > 1e-12 * g.norm_squared()).count();
    assert_eq!(nonzero, 1);
}

#[test]
fn linear_fisher_matches_brute_force() {
    let data = linear_data(40, 3, 0.5, 7);
    let m = fit_linear(&data);
    let f = empirical_fisher(&m, &data, FisherMode::Full).unwrap().repr.to_dense();
    let mut direct = DMatrix::zeros(3, 3);
    for i in 0..data.len() {
        let x = data.input(i);
        let r = data.target(i)[0] - crate::math::dot(m.theta(), x);
        for a in 0..3 {
            for b in 0..3 {
                direct[(a, b)] += r * r * x[a] * x[b];
            }
        }
    }
    direct /= data.len() as f64;
    assert!((f - direct).abs().max() < 1e-13);
}

#[test]
fn full_diagonal_equals_diag_mode() {
    let data = linear_data(37, 4, 0.5, 1);
    let m = fit_linear(&data);
    let full = empirical_fisher(&m, &data, FisherMode::Full).unwrap();
    let diag = empirical_fisher(&m, &data, FisherMode::Diag).unwrap();
    let Repr::Diagonal(d) = &diag.repr else { panic!() };
    let Repr::Full(f) = &full.repr else { panic!() };
    for (i, v) in d.iter().enumerate() {
        assert_eq!(f[(i, i)].to_bits(), v.to_bits());
    }
}

#[test]
fn linear_hessian_is_gram_matrix() {
    let data = linear_data(25, 3, 0.5, 3);
    let x = DMatrix::from_row_slice(25, 3, data.inputs_flat());
    let gram = x.transpose() * &x;
    for theta in [vec![0.0, 0.0, 0.0], vec![1.0, -2.0, 5.0]] {
        let m = Model::new(ModelKind::LinearRegression, 3, 1, 0).unwrap().with_theta(theta).unwrap();
        let h = loss_hessian(&m, &data).unwrap().repr.to_dense();
        assert!((&h - &gram).abs().max() <= 1e-12 * gram.abs().max());
    }
}

#[test]
fn bernoulli_hessian_and_sandwich() {
    let (n, k) = (100, 90);
    let theta = 0.9;
    let m = bernoulli_at(theta);
    let data = bernoulli_data(n, k);
    let h = loss_hessian(&m, &data).unwrap();
    assert!(rel_err(scalar(&h), n as f64 / (theta * (1.0 - theta))) < 1e-12);
    let f = empirical_fisher(&m, &data, FisherMode::Full).unwrap();
    assert!(rel_err(scalar(&h), n as f64 * scalar(&f)) < 1e-8);
    let s = sandwich(&m, &data, 0.0).unwrap();
    assert!(rel_err(scalar(&s), theta * (1.0 - theta) / n as f64) < 1e-12);
    assert_eq!(s.role, Role::Covariance);
}

#[test]
fn sandwich_reduces_when_hessian_is_n_fisher() {
    let f = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let n = 10;
    let blocks = crate::autodiff::default_layout(2);
    let fisher = CovarianceEstimate::new(SigmaKind::FisherFull, Repr::Full(f.clone()), Role::Curvature, n, blocks.clone()).unwrap();
    let h = CovarianceEstimate::new(SigmaKind::Hessian, Repr::Full(f * n as f64), Role::Curvature, n, blocks).unwrap();
    let s = sandwich_from(&h, &fisher, 0.0).unwrap().repr.to_dense();
    let canonical = to_covariance(&fisher, 0.0).unwrap().repr.to_dense();
    assert!((s - &canonical).abs().max() < 1e-14 * canonical.abs().max() * 10.0);
}

#[test]
fn sandwich_approaches_canonical_for_large_n() {
    // The gap is a sampling fluctuation of order 1/√N, so judge the median over
    // independent datasets rather than one draw.
    let mut errs: Vec<f64> = (0..9)
        .map(|seed| {
            let data = linear_data(10_000, 2, 1.0, seed);
            let m = fit_linear(&data);
            let s = sandwich(&m, &data, 0.0).unwrap().repr.to_dense();
            let f = empirical_fisher(&m, &data, FisherMode::Full).unwrap();
            let c = to_covariance(&f, 0.0).unwrap().repr.to_dense();
            (0..2).map(|i| rel_err(s[(i, i)], c[(i, i)])).fold(0.0, f64::max)
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[4] < 0.05, "{errs:?}");
}

#[test]
fn invert_diagonal() {
    let d = CovarianceEstimate::new(
        SigmaKind::FisherDiag,
        Repr::Diagonal(vec![2.0, 4.0]),
        Role::Curvature,
        1,
        crate::autodiff::default_layout(2),
    )
    .unwrap();
    let inv = invert(&d, 0.0).unwrap();
    assert_eq!(inv.repr, Repr::Diagonal(vec![0.5, 0.25]));
    assert_eq!(inv.role, Role::Covariance);
    let zero = CovarianceEstimate { repr: Repr::Diagonal(vec![0.0, 1.0]), ..d };
    assert_eq!(invert(&zero, 0.0), Err(Error::Factorization { reg: 0.0 }));
    assert!(invert(&zero, 1e-3).is_ok());
    assert!(invert(&zero, -1.0).is_err());
}

#[test]
fn regularizer_grid_spans_full_range() {
    assert_eq!(REGULARIZER_GRID.len(), 25);
    for (i, r) in REGULARIZER_GRID.iter().enumerate() {
        assert!(rel_err(*r, libm::pow(10.0, i as f64 - 15.0)) < 1e-15);
    }
}

#[test]
fn indefinite_matrix_needs_stable_regularizer() {
    // Eigenvalues 3 and -0.02.
    let a = DMatrix::from_row_slice(2, 2, &[1.49, 1.51, 1.51, 1.49]);
    let h = CovarianceEstimate::new(SigmaKind::Hessian, Repr::Full(a), Role::Curvature, 1, crate::autodiff::default_layout(2)).unwrap();
    assert!(invert(&h, 0.0).is_err());
    let reg = smallest_stable_regularizer(&h).unwrap();
    assert_eq!(reg, 1e-1);
    let inv = invert(&h, reg).unwrap();
    assert!(inv.min_eigenvalue() > 0.0);
    assert!(invert(&h, 1e-2).is_err());
}

#[test]
fn indefinite_hessian_of_unconverged_mlp() {
    let data = linear_data(20, 2, 0.1, 5);
    let spec = crate::models::MlpSpec {
        hidden: vec![3],
        ..Default::default()
    };
    let m = Model::new(ModelKind::Mlp(spec), 2, 1, 4).unwrap();
    let h = loss_hessian(&m, &data).unwrap();
    let reg = smallest_stable_regularizer(&h).unwrap();
    let inv = invert(&h, reg).unwrap();
    assert!(inv.repr.to_dense().iter().all(|v| v.is_finite()));
    assert!(h.min_eigenvalue() + reg >= MIN_STABLE_EIGENVALUE);
}

#[test]
fn block_scales_need_block_structure() {
    let blocks = vec![Block::new("a", 0, 1), Block::new("b", 1, 1)];
    let full = CovarianceEstimate::new(
        SigmaKind::FisherFull,
        Repr::Full(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0])),
        Role::Covariance,
        1,
        blocks.clone(),
    )
    .unwrap();
    assert!(full.with_block_scales(&[1.0, 2.0]).is_err());
    let diag = CovarianceEstimate::new(SigmaKind::FisherDiag, Repr::Diagonal(vec![1.0, 3.0]), Role::Covariance, 1, blocks).unwrap();
    let s = diag.with_block_scales(&[2.0, 0.5]).unwrap();
    assert_eq!(s.repr, Repr::Diagonal(vec![2.0, 1.5]));
    assert_eq!(s.kind, SigmaKind::Learned);
    assert_eq!(diag.with_block_scales(&[1.0, 1.0]).unwrap().repr, diag.repr);
}

#[test]
fn ema_constant_stream_converges_to_square() {
    let mut acc = EmaDiagFisher::new(2, 1e-3).unwrap();
    let g = vec![vec![3.0, -0.5]; 4];
    for _ in 0..5 {
        acc.update(&g).unwrap();
    }
    let e = acc.estimate();
    assert!(rel_err(e[0], 9.0) < 1e-12 && rel_err(e[1], 0.25) < 1e-12);
}

#[test]
fn ema_tracks_second_phase() {
    let decay = 1e-2;
    let mut acc = EmaDiagFisher::new(1, decay).unwrap();
    for _ in 0..500 {
        acc.update(&[[1.0]]).unwrap();
    }
    for _ in 0..(10.0 / decay) as usize {
        acc.update(&[[2.0]]).unwrap();
    }
    assert!(rel_err(acc.estimate()[0], 4.0) < 0.01);
}

#[test]
fn ema_rejects_bad_decay() {
    assert!(EmaDiagFisher::new(1, 0.0).is_err());
    assert!(EmaDiagFisher::new(1, 1.0).is_err());
    let d = EmaConfig::default();
    assert_eq!((d.decay, d.batch), (1e-3, 32));
}

#[test]
fn ema_matches_diag_fisher() {
    let data = linear_data(300, 3, 1.0, 8);
    let m = fit_linear(&data);
    let ema = ema_diag_fisher(&m, &data, &EmaConfig::default()).unwrap();
    let diag = empirical_fisher(&m, &data, FisherMode::Diag).unwrap();
    let (Repr::Diagonal(a), Repr::Diagonal(b)) = (&ema.repr, &diag.repr) else { panic!() };
    for (x, y) in a.iter().zip(b) {
        assert!(rel_err(*x, *y) < 0.05, "{x} vs {y}");
    }
}

#[test]
fn select_regularizer_prefers_best_score() {
    let (reg, score) = select_regularizer(&REGULARIZER_GRID, |r| Ok(-(libm::log10(r) + 3.0).abs())).unwrap();
    assert_eq!((reg, score), (1e-3, 0.0));
}

#[test]
fn fisher_errors() {
    assert!(fisher_from_grads(&[], FisherMode::Diag, vec![]).is_err());
    assert!(SigmaKind::parse("kfac").is_err());
    for k in SigmaKind::ALL {
        assert_eq!(SigmaKind::parse(k.name()).unwrap(), k);
    }
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let a = DMatrix::from_vec(n, n, v);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    })
}

proptest! {
    #[test]
    fn invert_roundtrip(m in spd(4), reg in 0.0f64..2.0) {
        let est = CovarianceEstimate::new(SigmaKind::FisherFull, Repr::Full(m.clone()), Role::Curvature, 3, crate::autodiff::default_layout(4)).unwrap();
        let back = invert(&invert(&est, reg).unwrap(), 0.0).unwrap().repr.to_dense();
        let target = m + DMatrix::identity(4, 4) * reg;
        prop_assert!((back - &target).abs().max() <= 1e-8 * target.abs().max());
    }

    #[test]
    fn fisher_is_psd(gs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..20)) {
        let f = fisher_from_grads(&gs, FisherMode::Full, crate::autodiff::default_layout(3)).unwrap();
        let m = f.repr.to_dense();
        prop_assert!((&m - m.transpose()).abs().max() == 0.0);
        prop_assert!(f.min_eigenvalue() >= -1e-12 * m.abs().max().max(1.0));
    }
}
