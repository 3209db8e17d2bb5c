mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tsoed_core::models::{LinearModel, NoiseModel};
use tsoed_core::rng::standard_normal_vec;
use tsoed_core::soed::diagnostics;
use tsoed_core::transport::{
    build_conditional_stage, build_deep, tt_cross_build, Basis1D, CrossSettings, KrMap, Map, SquaredTtDensity,
    TransportMap, TransportSettings,
};

fn gaussian_log(x: &[f64], corr: f64) -> f64 {
    let det = 1.0 - corr * corr;
    -0.5 * (x[0] * x[0] - 2.0 * corr * x[0] * x[1] + x[1] * x[1]) / det
}

fn kr_for(log_target: impl Fn(&[f64]) -> f64, dim: usize, seed: u64) -> KrMap {
    let basis = Basis1D::new(30, 5.0).unwrap();
    let settings = CrossSettings {
        sweeps: 6,
        ..Default::default()
    };
    let (tt, report) = tt_cross_build(&log_target, dim, &basis, &settings, &mut rng(seed)).unwrap();
    KrMap::new(SquaredTtDensity::with_relative_tau(tt, 1e-4, report.max_f2).unwrap())
}

fn single_layer() -> TransportSettings {
    TransportSettings {
        betas: vec![1.0],
        ..Default::default()
    }
}

#[test]
fn standard_gaussian_median_maps_to_zero() {
    let kr = kr_for(|x| -0.5 * x[0] * x[0], 1, 1);
    let x = kr.forward(&DVector::from_vec(vec![0.0])).unwrap();
    assert!(x[0].abs() < 1e-8, "median {}", x[0]);
}

#[test]
fn round_trip_on_correlated_gaussian() {
    let kr = kr_for(|x| gaussian_log(x, 0.5), 2, 2);
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = DVector::from_vec(standard_normal_vec(&mut r, 2));
        let u = kr.inverse(&x).unwrap();
        let back = kr.forward(&u).unwrap();
        worst = worst.max((back - &x).amax());
    }
    assert!(worst < 1e-8, "round trip error {worst:.3e}");
}

#[test]
fn product_density_gives_diagonal_map() {
    let kr = kr_for(|x| -0.5 * x[0] * x[0] - 0.5 * (x[1] - 1.0).powi(2) / 4.0, 2, 4);
    let u = DVector::from_vec(vec![0.3, -0.7]);
    let j = kr.jacobian(&u).unwrap();
    assert!(j[(1, 0)].abs() < 1e-6, "off-diagonal {}", j[(1, 0)]);
    assert!(j[(0, 1)].abs() < 1e-12);
}

#[test]
fn monotone_triangular_with_defensive_floor() {
    let kr = kr_for(|x| gaussian_log(x, 0.8), 2, 5);
    let d = &kr.density;
    let mut r = rng(6);
    for _ in 0..1000 {
        let u = DVector::from_vec(standard_normal_vec(&mut r, 2));
        let (x, _) = kr.forward_with_log_det(&u).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut up = u.clone();
            up[i] += h;
            let xp = kr.forward(&up).unwrap();
            assert!(xp[i] > x[i], "component {i} not increasing");
        }
        let rho: f64 = x.iter().map(|v| d.basis().ref_pdf(*v)).product();
        assert!(d.unnormalized(x.as_slice()) >= d.tau() * rho * (1.0 - 1e-12));
    }
}

#[test]
fn pushforward_density_is_normalized() {
    let kr = kr_for(|x| gaussian_log(x, 0.5), 2, 7);
    // Importance sampling against a wide Gaussian proposal.
    let mut r = rng(8);
    let n = 20_000;
    let s = 2.0;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let z = standard_normal_vec(&mut r, 2);
            let x = DVector::from_vec(z.iter().map(|v| v * s).collect());
            let lq = z.iter().map(|v| -0.5 * v * v).sum::<f64>() - 2.0 * (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
            (kr.log_pushforward_density(&x).unwrap() - lq).exp()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se + 1e-6, "integral {mean} +- {se}");
}

#[test]
fn kr_log_det_matches_change_of_variables() {
    let kr = kr_for(|x| gaussian_log(x, 0.5), 2, 9);
    let u = DVector::from_vec(vec![0.4, -1.2]);
    let (x, ld) = kr.forward_with_log_det(&u).unwrap();
    let j = kr.jacobian(&u).unwrap();
    assert!(j.determinant() > 0.0);
    assert!((j.determinant().ln() - ld).abs() < 1e-3);
    // log pi_hat(x) = log rho(u) - log det.
    let lrho: f64 = u.iter().map(|v| kr.density.basis().ref_logpdf(*v)).sum();
    assert!((kr.log_pushforward_density(&x).unwrap() - (lrho - ld)).abs() < 1e-8);
}

#[test]
fn deep_single_layer_equals_direct_build() {
    let target = |x: &[f64]| gaussian_log(x, 0.6);
    let deep = build_deep(&target, 2, &single_layer(), &mut rng(10)).unwrap().into_map();
    let direct = Map::Kr(kr_for(target, 2, 10));
    let log_t = |x: &DVector<f64>| Ok(target(x.as_slice()));
    let a = diagnostics(&deep, &log_t, 4000, &mut rng(11)).unwrap();
    let b = diagnostics(&direct, &log_t, 4000, &mut rng(11)).unwrap();
    assert!((a.hellinger - b.hellinger).abs() < 1e-3, "{} vs {}", a.hellinger, b.hellinger);
}

#[test]
fn reference_target_layers_are_identity() {
    let target = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
    let deep = build_deep(&target, 3, &TransportSettings::default(), &mut rng(12)).unwrap().into_map();
    let log_t = |x: &DVector<f64>| Ok(target(x.as_slice()));
    let d = diagnostics(&deep, &log_t, 2000, &mut rng(13)).unwrap();
    assert!(d.hellinger < 1e-3, "hellinger {}", d.hellinger);
}

#[test]
fn two_layer_banana() {
    let target = |x: &[f64]| banana_log_density(x, 0.5);
    let settings = TransportSettings {
        betas: vec![0.5, 1.0],
        ..Default::default()
    };
    let deep = build_deep(&target, 2, &settings, &mut rng(14)).unwrap().into_map();
    let log_t = |x: &DVector<f64>| Ok(target(x.as_slice()));
    let d = diagnostics(&deep, &log_t, 4000, &mut rng(15)).unwrap();
    assert!(d.hellinger < 0.05, "hellinger {}", d.hellinger);
}

fn linear_problem(g: DMatrix<f64>) -> (LinearModel, NoiseModel) {
    (LinearModel::new(g, 1).unwrap(), NoiseModel::isotropic(1.0).unwrap())
}

#[test]
fn conditional_linear_gaussian_matches_bayes() {
    let (model, noise) = linear_problem(DMatrix::from_element(1, 1, 1.0));
    let u = DMatrix::identity(1, 1);
    let (cond, report) = build_conditional_stage(
        &model,
        &noise,
        &Map::Identity(1),
        0,
        &u,
        &single_layer(),
        1000,
        &mut rng(16),
    )
    .unwrap();
    assert!(!report.identity);
    let map = cond.at_data(&DVector::from_vec(vec![0.5])).unwrap();
    let xs: Vec<DVector<f64>> = qmc_normal(1, 10_000, 17).iter().map(|u| map.forward(u).unwrap()).collect();
    let (m, c) = sample_mean_cov(&xs);
    // Posterior N(0.25, 0.5).
    assert!((m[0] - 0.25).abs() < 0.02 * 0.5f64.sqrt(), "mean {}", m[0]);
    assert!((c[(0, 0)] / 0.5 - 1.0).abs() < 0.02, "var {}", c[(0, 0)]);
}

#[test]
fn zero_signal_conditional_is_identity() {
    let (model, noise) = linear_problem(DMatrix::zeros(1, 1));
    let (cond, _) = build_conditional_stage(
        &model,
        &noise,
        &Map::Identity(1),
        0,
        &DMatrix::identity(1, 1),
        &single_layer(),
        1000,
        &mut rng(18),
    )
    .unwrap();
    let map = cond.at_data(&DVector::from_vec(vec![0.7])).unwrap();
    let xs: Vec<f64> = qmc_normal(1, 5000, 19).iter().map(|u| map.forward(u).unwrap()[0]).collect();
    let (d, _) = ks_one_sample(&xs, std_normal_cdf);
    assert!(d < 0.02, "KS distance {d}");
}

#[test]
fn empty_basis_gives_identity_conditional() {
    let (model, noise) = linear_problem(DMatrix::from_element(1, 2, 1.0));
    let (cond, report) = build_conditional_stage(
        &model,
        &noise,
        &Map::Identity(2),
        0,
        &DMatrix::zeros(2, 0),
        &single_layer(),
        100,
        &mut rng(20),
    )
    .unwrap();
    assert!(report.identity && cond.is_identity());
    assert!(matches!(cond.at_data(&DVector::from_vec(vec![1.0])).unwrap(), Map::Identity(2)));
}

#[test]
fn full_basis_matches_unreduced_build() {
    let g = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let (model, noise) = linear_problem(g.clone());
    let y = DVector::from_vec(vec![0.8]);
    let rot = nalgebra::Rotation2::new(0.7).matrix().clone_owned();
    let rot = DMatrix::from_iterator(2, 2, rot.iter().copied());
    let mut maps = vec![];
    for (i, u) in [DMatrix::identity(2, 2), rot].into_iter().enumerate() {
        let (cond, _) = build_conditional_stage(
            &model,
            &noise,
            &Map::Identity(2),
            0,
            &u,
            &single_layer(),
            1000,
            &mut rng(21 + i as u64),
        )
        .unwrap();
        maps.push(cond.at_data(&y).unwrap());
    }
    let (mean, cov) = linear_posterior(&g, 1.0, &y);
    for map in &maps {
        let xs: Vec<DVector<f64>> = qmc_normal(2, 10_000, 23).iter().map(|u| map.forward(u).unwrap()).collect();
        let (m, c) = sample_mean_cov(&xs);
        assert!((&m - &mean).amax() < 0.02, "mean {m} vs {mean}");
        assert!((c - &cov).amax() < 0.02, "cov");
    }
}

#[test]
fn joint_samples_conditioned_on_data_bin_match_conditional_map() {
    let (model, noise) = linear_problem(DMatrix::from_element(1, 1, 1.0));
    let (cond, _) = build_conditional_stage(
        &model,
        &noise,
        &Map::Identity(1),
        0,
        &DMatrix::identity(1, 1),
        &single_layer(),
        1000,
        &mut rng(24),
    )
    .unwrap();
    let mut r = rng(25);
    let mut binned = vec![];
    while binned.len() < 400 {
        let u = standard_normal_vec(&mut r, 2);
        let (y, v) = cond.joint_forward(&u).unwrap();
        if (y[0] - 0.5).abs() < 0.05 {
            binned.push(v[0]);
        }
    }
    let map = cond.at_data(&DVector::from_vec(vec![0.5])).unwrap();
    let direct: Vec<f64> = (0..2000)
        .map(|_| map.forward(&DVector::from_vec(standard_normal_vec(&mut r, 1))).unwrap()[0])
        .collect();
    let (_, p) = ks_two_sample(&binned, &direct);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn composed_log_det_is_additive() {
    let a = Map::Kr(kr_for(|x| gaussian_log(x, 0.3), 2, 26));
    let b = Map::linear(DVector::from_vec(vec![0.1, -0.2]), DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.0, 0.8])).unwrap();
    let c = Map::compose(a.clone(), b.clone()).unwrap();
    let u = DVector::from_vec(vec![0.2, 0.9]);
    let (mid, lb) = b.forward_with_log_det(&u).unwrap();
    let (_, la) = a.forward_with_log_det(&mid).unwrap();
    let lc = c.log_det_jacobian(&u).unwrap();
    assert!((lc - la - lb).abs() < 1e-8);
    let fd = c.jacobian(&u).unwrap().determinant().ln();
    assert!((fd - lc).abs() < 1e-4, "fd {fd} vs {lc}");
}

#[test]
fn non_orthonormal_embedding_rejected() {
    let u = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    assert!(Map::embedded(u, Map::Identity(1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embedding_fixes_orthogonal_complement(theta in 0.0f64..6.0, s in -3.0f64..3.0, scale in 0.5f64..2.0) {
        let u = DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()]);
        let inner = Map::linear(DVector::from_vec(vec![0.3]), DMatrix::from_element(1, 1, scale)).unwrap();
        let map = Map::embedded(u.clone(), inner).unwrap();
        let v = DVector::from_vec(vec![-theta.sin() * s, theta.cos() * s]);
        let t = map.forward(&v).unwrap();
        prop_assert!((&t - &v - &u * 0.3).amax() < 1e-12);
        prop_assert!((map.log_det_jacobian(&v).unwrap() - scale.ln()).abs() < 1e-12);
        let back = map.inverse(&t).unwrap();
        prop_assert!((back - v).amax() < 1e-12);
    }

    #[test]
    fn linear_pullback_adds_log_det(a in 0.2f64..3.0, b in 0.2f64..3.0, c in -1.0f64..1.0, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let m = DMatrix::from_row_slice(2, 2, &[a, 0.0, c, b]);
        let map = Map::linear(DVector::zeros(2), m).unwrap();
        let u = DVector::from_vec(vec![x0, x1]);
        let target = |x: &DVector<f64>| Ok(-0.5 * x.norm_squared());
        let lp = map.log_pullback_density(&u, &target).unwrap();
        let x = map.forward(&u).unwrap();
        prop_assert!((lp - (-0.5 * x.norm_squared() + (a * b).ln())).abs() < 1e-12);
    }
}
