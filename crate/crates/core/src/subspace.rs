//! Likelihood-informed subspaces from averaged Fisher and gradient Gram matrices.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoedError};
use crate::linalg::gram_eigen;
use crate::models::{CandidateSet, ForwardModel, NoiseModel};
use crate::rng::{standard_normal_vec, Stream};
use crate::transport::TransportMap;

/// ESS fraction below which importance weights are flagged as degenerate.
pub const DEGENERATE_ESS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LisKind {
    DataFree,
    DataDependent,
}

/// Orthonormal basis of a likelihood-informed subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LisBasis {
    pub basis: DMatrix<f64>,
    /// Spectrum of the generating matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub kind: LisKind,
    pub tolerance: f64,
    /// Value of the truncation criterion at the chosen rank.
    pub tail: f64,
    /// Set when the rank was cut by the configured cap.
    pub capped: bool,
    /// Set when importance weights were degenerate.
    pub flagged: bool,
}

impl LisBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// `1/2 sum_{j>r} log(1 + lambda_j)`.
pub fn information_tail(eigenvalues: &[f64], r: usize) -> f64 {
    0.5 * eigenvalues.iter().skip(r).map(|l| l.max(0.0).ln_1p()).sum::<f64>()
}

/// `1/2 (sum_{j>r} lambda_j)^{1/2}`.
pub fn hellinger_tail(eigenvalues: &[f64], r: usize) -> f64 {
    0.5 * eigenvalues.iter().skip(r).map(|l| l.max(0.0)).sum::<f64>().sqrt()
}

/// Smallest `r` with `tail(r) <= tol`.
pub fn truncation_rank(eigenvalues: &[f64], tol: f64, tail: impl Fn(&[f64], usize) -> f64) -> usize {
    (0..=eigenvalues.len())
        .find(|&r| tail(eigenvalues, r) <= tol)
        .unwrap_or(eigenvalues.len())
}

/// Prior-averaged Fisher information for every candidate, kept as
/// per-sample factors `B_i = Gamma^{-1/2} grad G(T(v_i)) grad T(v_i)`.
#[derive(Debug, Clone)]
pub struct AveragedInformation {
    factors: Vec<DMatrix<f64>>,
    candidates: CandidateSet,
    param_dim: usize,
}

impl AveragedInformation {
    pub fn from_factors(factors: Vec<DMatrix<f64>>, candidates: CandidateSet, param_dim: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(SoedError::InvalidInput("averaged information needs at least one sample".into()));
        }
        for f in &factors {
            if f.shape() != (candidates.total_obs(), param_dim) {
                return Err(SoedError::dim("information factor rows", candidates.total_obs(), f.nrows()));
            }
        }
        Ok(Self {
            factors,
            candidates,
            param_dim,
        })
    }

    pub fn samples(&self) -> usize {
        self.factors.len()
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    /// Stacked factor `B` with `H(e) = B^T B`.
    pub fn stacked_factor(&self, e: usize) -> Result<DMatrix<f64>> {
        let rows = self.candidates.select_rows(e)?;
        let nd = rows.len();
        let n = self.factors.len();
        let scale = 1.0 / (n as f64).sqrt();
        let mut b = DMatrix::zeros(n * nd, self.param_dim);
        for (i, f) in self.factors.iter().enumerate() {
            b.rows_mut(i * nd, nd).copy_from(&(f.rows(rows.start, nd) * scale));
        }
        Ok(b)
    }

    /// `H(e) = (1/N) sum_i B_i^T W(e)^T W(e) B_i`.
    pub fn matrix(&self, e: usize) -> Result<DMatrix<f64>> {
        let b = self.stacked_factor(e)?;
        Ok(b.tr_mul(&b))
    }
}

/// Monte Carlo estimate of the averaged Fisher information of every
/// candidate under the map `T`, one model Jacobian per sample.
pub fn average_fisher(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    map: &dyn TransportMap,
    samples: usize,
    rng: &mut Stream,
) -> Result<AveragedInformation> {
    if samples == 0 {
        return Err(SoedError::InvalidInput("average_fisher: sample count must be positive".into()));
    }
    let nm = model.param_dim();
    if map.dim() != nm {
        return Err(SoedError::dim("average_fisher map", nm, map.dim()));
    }
    let cands = model.candidates().clone();
    let inv_sigma = DVector::from_fn(cands.total_obs(), |row, _| {
        1.0 / noise.sigma(row / cands.obs_dim, row % cands.obs_dim)
    });
    let points: Vec<DVector<f64>> = (0..samples)
        .map(|_| DVector::from_vec(standard_normal_vec(rng, nm)))
        .collect();
    let results: Vec<Result<DMatrix<f64>>> = points
        .par_iter()
        .map(|v| {
            let m = map.forward(v)?;
            let mut j = model.jacobian(&m)?;
            for (mut row, s) in j.row_iter_mut().zip(inv_sigma.iter()) {
                row *= *s;
            }
            map.pullback_rows(v, &j)
        })
        .collect();
    let mut factors = Vec::with_capacity(samples);
    for r in results {
        match r {
            Ok(b) if b.iter().all(|x| x.is_finite()) => factors.push(b),
            Ok(_) => warn!("average_fisher: non-finite Jacobian sample discarded"),
            Err(e @ SoedError::ModelEvaluation(_)) => warn!("average_fisher: sample discarded: {e}"),
            Err(e) => return Err(e),
        }
    }
    if factors.is_empty() {
        return Err(SoedError::Numerical("average_fisher: every sample was discarded".into()));
    }
    AveragedInformation::from_factors(factors, cands, nm)
}

/// Data-free LIS for candidate `e`: smallest `r` with
/// `1/2 sum_{j>r} log(1 + lambda_j) <= tol`, optionally capped.
pub fn data_free_lis(info: &AveragedInformation, e: usize, tol: f64, max_rank: Option<usize>) -> Result<LisBasis> {
    if !(tol > 0.0) {
        return Err(SoedError::InvalidInput("LIS tolerance must be positive".into()));
    }
    let b = info.stacked_factor(e)?;
    lis_from_factor(&b, tol, max_rank, LisKind::DataFree, information_tail)
}

fn lis_from_factor(
    b: &DMatrix<f64>,
    tol: f64,
    max_rank: Option<usize>,
    kind: LisKind,
    tail: fn(&[f64], usize) -> f64,
) -> Result<LisBasis> {
    let (values, _) = gram_eigen(b, 0)?;
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let mut r = truncation_rank(&values, tol, tail);
    let mut capped = false;
    if let Some(cap) = max_rank {
        if r > cap {
            warn!("LIS rank {r} capped at {cap}");
            r = cap;
            capped = true;
        }
    }
    let (_, basis) = gram_eigen(b, r)?;
    Ok(LisBasis {
        basis,
        tail: tail(&values, r),
        eigenvalues: values,
        kind,
        tolerance: tol,
        capped,
        flagged: false,
    })
}

/// Self-normalized importance-sampling estimate of the gradient Gram matrix.
#[derive(Debug, Clone)]
pub struct WeightedGram {
    /// Rows `sqrt(w_i / sum w) g_i^T`.
    pub factor: DMatrix<f64>,
    pub log_weights: Vec<f64>,
    pub ess_fraction: f64,
}

/// `(sum w)^2 / (N sum w^2)` from log-weights.
pub fn ess_fraction(log_weights: &[f64]) -> f64 {
    let finite: Vec<f64> = log_weights.iter().copied().filter(|w| w.is_finite()).collect();
    if finite.is_empty() {
        return 0.0;
    }
    let mx = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (s1, s2) = finite.iter().fold((0.0, 0.0), |(a, b), w| {
        let x = (w - mx).exp();
        (a + x, b + x * x)
    });
    s1 * s1 / (log_weights.len() as f64 * s2)
}

/// Gram matrix of posterior-gradients with weights `p / pi_hat` at samples
/// drawn through `map`. `log_post` returns the unnormalized log-posterior
/// and the log-likelihood gradient at a point.
pub fn weighted_gradient_gram(
    map: &dyn TransportMap,
    log_post: &(dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Sync),
    samples: usize,
    rng: &mut Stream,
) -> Result<WeightedGram> {
    if samples < 2 {
        return Err(SoedError::InvalidInput("gradient Gram needs at least 2 samples".into()));
    }
    let n = map.dim();
    let points: Vec<DVector<f64>> = (0..samples)
        .map(|_| DVector::from_vec(standard_normal_vec(rng, n)))
        .collect();
    let evals: Vec<Result<(f64, DVector<f64>)>> = points
        .par_iter()
        .map(|u| {
            let (x, ld) = map.forward_with_log_det(u)?;
            let log_q = crate::models::std_normal_logpdf(u) - ld;
            let (lp, g) = log_post(&x)?;
            Ok((lp - log_q, g))
        })
        .collect();
    let mut log_w = Vec::with_capacity(samples);
    let mut grads = Vec::with_capacity(samples);
    for r in evals {
        let (lw, g) = r?;
        log_w.push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
        grads.push(g);
    }
    let mx = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(SoedError::Numerical("importance weights are all zero".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut factor = DMatrix::zeros(samples, n);
    for (i, (wi, g)) in w.iter().zip(&grads).enumerate() {
        if *wi > 0.0 {
            factor.set_row(i, &(g.transpose() * (wi / total).sqrt()));
        }
    }
    Ok(WeightedGram {
        factor,
        ess_fraction: ess_fraction(&log_w),
        log_weights: log_w,
    })
}

/// Data-dependent LIS: smallest `r` with `1/2 (sum_{j>r} lambda_j)^{1/2} <= tol`.
pub fn data_dependent_lis(
    map: &dyn TransportMap,
    log_post: &(dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Sync),
    tol: f64,
    samples: usize,
    max_rank: Option<usize>,
    rng: &mut Stream,
) -> Result<(LisBasis, WeightedGram)> {
    if !(tol > 0.0) {
        return Err(SoedError::InvalidInput("LIS tolerance must be positive".into()));
    }
    let gram = weighted_gradient_gram(map, log_post, samples, rng)?;
    let mut lis = lis_from_factor(&gram.factor, tol, max_rank, LisKind::DataDependent, hellinger_tail)?;
    if gram.ess_fraction < DEGENERATE_ESS {
        warn!("data-dependent LIS: degenerate weights (ESS/N = {:.3e})", gram.ess_fraction);
        lis.flagged = true;
    }
    Ok((lis, gram))
}
