//! Design criteria over a finite candidate set.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoedError};
use crate::linalg::{cholesky_with_jitter, eigensym, logdet_identity_plus_gram};
use crate::models::{log_likelihood_from_output, ForwardModel, History, NoiseModel};
use crate::rng::{standard_normal_vec, Stream};
use crate::subspace::AveragedInformation;
use crate::transport::TransportMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ub,
    Nmc,
    Gauss,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ub => "ub",
            Method::Nmc => "nmc",
            Method::Gauss => "gauss",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = SoedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ub" => Ok(Method::Ub),
            "nmc" => Ok(Method::Nmc),
            "gauss" => Ok(Method::Gauss),
            other => Err(SoedError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-candidate scores of one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignScoreTable {
    pub method: Method,
    pub scores: Vec<f64>,
    /// Monte Carlo standard errors; zero where not applicable.
    pub std_errors: Vec<f64>,
    pub argmax: usize,
    pub samples: usize,
    pub flagged: bool,
}

impl DesignScoreTable {
    pub fn new(method: Method, scores: Vec<f64>, std_errors: Vec<f64>, samples: usize) -> Result<Self> {
        if scores.is_empty() || scores.len() != std_errors.len() {
            return Err(SoedError::dim("score table", scores.len(), std_errors.len()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(SoedError::Numerical(format!(
                "{} score of candidate {i} is not finite",
                method.name()
            )));
        }
        Ok(Self {
            method,
            argmax: argmax(&scores),
            scores,
            std_errors,
            samples,
            flagged: false,
        })
    }
}

/// `1/2 log det(I + H(e))` for every candidate, via the smaller Gram matrix.
pub fn ieig_upper_bound_all(info: &AveragedInformation) -> Result<DesignScoreTable> {
    let ne = info.candidates().count;
    let scores = (0..ne)
        .into_par_iter()
        .map(|e| {
            let b = info.stacked_factor(e)?;
            logdet_identity_plus_gram(&b).map(|l| 0.5 * l).map_err(|err| {
                let spectrum = eigensym(&b.tr_mul(&b)).map(|s| s.values).unwrap_or_default();
                SoedError::Numerical(format!("bound for candidate {e}: {err}; spectrum {spectrum:?}"))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    DesignScoreTable::new(Method::Ub, scores, vec![0.0; ne], info.samples())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Nested Monte Carlo iEIG for every candidate, with one prior sample set
/// reused across candidates and for the inner evidence estimate.
pub fn nested_mc_eig_all(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    map: &dyn TransportMap,
    n_out: usize,
    rng: &mut Stream,
) -> Result<DesignScoreTable> {
    if n_out < 2 {
        return Err(SoedError::InvalidInput("nested MC needs at least 2 samples".into()));
    }
    let nm = model.param_dim();
    let cands = model.candidates().clone();
    let points: Vec<DVector<f64>> = (0..n_out)
        .map(|_| DVector::from_vec(standard_normal_vec(rng, nm)))
        .collect();
    let noises: Vec<Vec<f64>> = (0..n_out)
        .map(|_| standard_normal_vec(rng, cands.total_obs()))
        .collect();
    let outputs = points
        .par_iter()
        .map(|v| model.evaluate(&map.forward(v)?))
        .collect::<Result<Vec<DVector<f64>>>>()?;
    let mut scores = Vec::with_capacity(cands.count);
    let mut errors = Vec::with_capacity(cands.count);
    let mut flagged = false;
    for e in 0..cands.count {
        let rows = cands.select_rows(e)?;
        let blocks: Vec<DVector<f64>> = outputs.iter().map(|g| g.rows(rows.start, rows.len()).into_owned()).collect();
        let terms = (0..n_out)
            .into_par_iter()
            .map(|i| {
                let y = DVector::from_fn(rows.len(), |k, _| {
                    blocks[i][k] + noise.sigma(e, k) * noises[i][rows.start + k]
                });
                let inner = blocks
                    .iter()
                    .map(|g| log_likelihood_from_output(noise, e, g, &y))
                    .collect::<Result<Vec<f64>>>()?;
                let evidence = log_sum_exp(&inner) - (n_out as f64).ln();
                Ok(inner[i] - evidence)
            })
            .collect::<Result<Vec<f64>>>()?;
        if terms.iter().any(|t| !t.is_finite()) {
            warn!("nested MC: degenerate evidence for candidate {e}");
            flagged = true;
        }
        let (mean, se) = mean_and_std_error(&terms);
        scores.push(mean);
        errors.push(se);
    }
    let mut table = DesignScoreTable::new(Method::Nmc, scores, errors, n_out)?;
    table.flagged = flagged;
    Ok(table)
}

/// Nested Monte Carlo iEIG estimate and standard error for a single candidate.
pub fn nested_mc_eig(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    map: &dyn TransportMap,
    e: usize,
    n_out: usize,
    rng: &mut Stream,
) -> Result<(f64, f64)> {
    model.candidates().select_rows(e)?;
    let t = nested_mc_eig_all(model, noise, map, n_out, rng)?;
    Ok((t.scores[e], t.std_errors[e]))
}

pub(crate) fn mean_and_std_error(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Gauss-Newton Gaussian approximation of the current posterior, in
/// whitened coordinates where the initial prior is standard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussState {
    pub map_point: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl GaussState {
    pub fn prior(n: usize) -> Self {
        Self {
            map_point: DVector::zeros(n),
            precision: DMatrix::identity(n, n),
            iterations: 0,
            converged: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.map_point.len()
    }

    /// Upper-triangular square root `L^{-T}` of the covariance, with `P = L L^T`.
    pub fn covariance_factor(&self) -> Result<DMatrix<f64>> {
        let (l, _) = cholesky_with_jitter(&self.precision)?;
        let inv = l
            .solve_lower_triangular(&DMatrix::identity(self.dim(), self.dim()))
            .ok_or_else(|| SoedError::Numerical("singular precision factor".into()))?;
        Ok(inv.transpose())
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let f = self.covariance_factor()?;
        Ok(&f * f.transpose())
    }

    /// MAP of the posterior given `history` (prior standard normal) from
    /// the current point, then the precision update with the Jacobian of
    /// the most recent experiment at the new MAP.
    pub fn assimilate(&self, model: &dyn ForwardModel, noise: &NoiseModel, history: &History) -> Result<Self> {
        let Some((e, _)) = history.entries.last() else {
            return Ok(self.clone());
        };
        let (point, iterations, converged) = map_estimate(model, noise, history, &self.map_point)?;
        let j = model.jacobian(&point)?;
        let rows = model.candidates().select_rows(*e)?;
        let mut je = j.rows(rows.start, rows.len()).into_owned();
        for (k, mut row) in je.row_iter_mut().enumerate() {
            row /= noise.sigma(*e, k);
        }
        Ok(Self {
            map_point: point,
            precision: &self.precision + je.tr_mul(&je),
            iterations,
            converged,
        })
    }
}

/// Gauss-Newton MAP of `1/2 |v|^2 - log L(H | v)` with backtracking.
///
/// Returns the best iterate, the iteration count and a convergence flag.
pub fn map_estimate(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    history: &History,
    init: &DVector<f64>,
) -> Result<(DVector<f64>, usize, bool)> {
    let cands = model.candidates();
    let objective = |v: &DVector<f64>| -> Result<f64> {
        Ok(0.5 * v.norm_squared() - history.log_likelihood(model, noise, v)?)
    };
    let mut v = init.clone();
    let mut f = objective(&v)?;
    for it in 0..100 {
        let (g_all, j_all) = model.evaluate_with_jacobian(&v)?;
        let n = v.len();
        let mut hess = DMatrix::identity(n, n);
        let mut grad = v.clone();
        for (e, y) in &history.entries {
            let rows = cands.select_rows(*e)?;
            let mut je = j_all.rows(rows.start, rows.len()).into_owned();
            let mut r = DVector::zeros(rows.len());
            for k in 0..rows.len() {
                let s = noise.sigma(*e, k);
                r[k] = (g_all[rows.start + k] - y[k]) / s;
                je.row_mut(k).scale_mut(1.0 / s);
            }
            grad += je.tr_mul(&r);
            hess += je.tr_mul(&je);
        }
        if grad.norm() < 1e-8 * (1.0 + f.abs()) {
            return Ok((v, it, true));
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| SoedError::Numerical("Gauss-Newton system not positive definite".into()))?
            .solve(&(-&grad));
        let slope = grad.dot(&step);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &v + &step * alpha;
            if let Ok(fc) = objective(&cand) {
                if fc <= f + 1e-4 * alpha * slope {
                    v = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            warn!("map_estimate: line search stalled at iteration {it}");
            return Ok((v, it, false));
        }
    }
    warn!("map_estimate: no convergence in 100 iterations");
    Ok((v, 100, false))
}

/// `1/2 sum_j [log(1 + l_j) - l_j / (1 + l_j)]`.
pub fn gaussian_kl_bracket(eigenvalues: &[f64]) -> f64 {
    0.5 * eigenvalues
        .iter()
        .map(|l| {
            let l = l.max(0.0);
            l.ln_1p() - l / (1.0 + l)
        })
        .sum::<f64>()
}

/// Gaussian-approximation iEIG score for every candidate, with data-space
/// eigenvalues of `Gamma^{-1/2} J_e C J_e^T Gamma^{-1/2}` at samples of the state.
pub fn gaussian_approx_eig_all(
    state: &GaussState,
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    samples: usize,
    rng: &mut Stream,
) -> Result<DesignScoreTable> {
    if samples == 0 {
        return Err(SoedError::InvalidInput("Gaussian approximation needs at least 1 sample".into()));
    }
    let factor = state.covariance_factor()?;
    let n = state.dim();
    let cands = model.candidates().clone();
    let points: Vec<DVector<f64>> = (0..samples)
        .map(|_| &state.map_point + &factor * DVector::from_vec(standard_normal_vec(rng, n)))
        .collect();
    let per_sample = points
        .par_iter()
        .map(|m| -> Result<Vec<f64>> {
            let j = model.jacobian(m)?;
            let jl = j * &factor;
            (0..cands.count)
                .map(|e| {
                    let rows = cands.select_rows(e)?;
                    let mut a = jl.rows(rows.start, rows.len()).into_owned();
                    for (k, mut row) in a.row_iter_mut().enumerate() {
                        row /= noise.sigma(e, k);
                    }
                    let eig = eigensym(&(&a * a.transpose()))?;
                    Ok(gaussian_kl_bracket(&eig.values))
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut scores = Vec::with_capacity(cands.count);
    let mut errors = Vec::with_capacity(cands.count);
    for e in 0..cands.count {
        let col: Vec<f64> = per_sample.iter().map(|s| s[e]).collect();
        let (m, se) = mean_and_std_error(&col);
        scores.push(m);
        errors.push(if samples > 1 { se } else { 0.0 });
    }
    DesignScoreTable::new(Method::Gauss, scores, errors, samples)
}
