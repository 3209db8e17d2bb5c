#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use tsoed_core::rng::{shifted_halton, substream, Stream};

pub fn rng(seed: u64) -> Stream {
    substream(seed, &[99])
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Low-discrepancy standard normal points.
pub fn qmc_normal(dim: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let normal = Normal::standard();
    shifted_halton(dim, n, &mut rng(seed))
        .into_iter()
        .map(|p| DVector::from_iterator(dim, p.into_iter().map(|u| normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12)))))
        .collect()
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let f = cdf(*v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    (d, kolmogorov_q((ne + 0.12 + 0.11 / ne) * d))
}

/// Random symmetric positive definite matrix with eigenvalues in `[0.5, 2.5]`.
pub fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    let a = DMatrix::from_fn(n, n, |_, _| r.random::<f64>() - 0.5);
    let q = a.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| 0.5 + 2.0 * r.random::<f64>()));
    &q * d * q.transpose()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let v = tsoed_core::rng::standard_normal_vec(&mut rng(seed), rows * cols);
    DMatrix::from_vec(rows, cols, v)
}

/// Gaussian posterior of `y = A v + eta`, `eta ~ N(0, sigma^2 I)`, `v ~ N(0, I)`.
pub fn linear_posterior(a: &DMatrix<f64>, sigma: f64, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let prec = DMatrix::identity(n, n) + a.tr_mul(a) / (sigma * sigma);
    let cov = prec.try_inverse().expect("posterior precision invertible");
    let mean = &cov * a.tr_mul(y) / (sigma * sigma);
    (mean, cov)
}

pub fn sample_mean_cov(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let cov = points.iter().fold(DMatrix::zeros(d, d), |acc, p| {
        let c = p - &mean;
        acc + &c * c.transpose()
    }) / (n - 1.0);
    (mean, cov)
}

/// `log` of the banana density `N(x1; 0, 1) N(x2; b x1^2 - b, 1)` up to a constant.
pub fn banana_log_density(x: &[f64], b: f64) -> f64 {
    let t = x[1] - b * (x[0] * x[0] - 1.0);
    -0.5 * x[0] * x[0] - 0.5 * t * t
}
