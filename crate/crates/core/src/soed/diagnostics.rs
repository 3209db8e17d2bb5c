//! Importance-sampling diagnostics of a map against an unnormalized target.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoedError};
use crate::models::std_normal_logpdf;
use crate::rng::{standard_normal_vec, Stream};
use crate::subspace::ess_fraction;
use crate::transport::TransportMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Hellinger distance estimate, `sqrt(1 - BC)`.
    pub hellinger: f64,
    pub ess_fraction: f64,
    /// Importance-weighted KL divergence from the prior to the approximation.
    pub kl: f64,
    pub samples: usize,
    pub flagged: bool,
}

/// Weighted sample set: `log w_i = log p(x_i) - log q(x_i)` with `x_i ~ q`.
#[derive(Debug, Clone)]
pub struct WeightedSamples {
    pub points: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    /// `log q(x_i)` of the (normalized) approximation.
    pub log_q: Vec<f64>,
}

impl WeightedSamples {
    /// Self-normalized weights scaled to mean one.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let mx = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(SoedError::Numerical("importance weights are all zero".into()));
        }
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - mx).exp()).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        Ok(w.into_iter().map(|x| x / mean).collect())
    }
}

/// Draws `n` samples through `map` and weights them against `log_target`.
pub fn weighted_samples(
    map: &dyn TransportMap,
    log_target: &(dyn Fn(&DVector<f64>) -> Result<f64> + Sync),
    n: usize,
    rng: &mut Stream,
) -> Result<WeightedSamples> {
    let dim = map.dim();
    let refs: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_vec(standard_normal_vec(rng, dim))).collect();
    let evals = refs
        .par_iter()
        .map(|u| {
            let (x, ld) = map.forward_with_log_det(u)?;
            let log_q = std_normal_logpdf(u) - ld;
            let lp = log_target(&x)?;
            Ok((x, lp - log_q, log_q))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = WeightedSamples {
        points: Vec::with_capacity(n),
        log_weights: Vec::with_capacity(n),
        log_q: Vec::with_capacity(n),
    };
    for (x, lw, lq) in evals {
        out.points.push(x);
        out.log_weights.push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
        out.log_q.push(lq);
    }
    Ok(out)
}

/// `1 - sum sqrt(w) / sqrt(N sum w)`, the Hellinger affinity complement.
pub fn hellinger_squared(log_weights: &[f64]) -> f64 {
    let mx = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return 1.0;
    }
    let (s_half, s_one) = log_weights.iter().fold((0.0, 0.0), |(a, b), l| {
        let w = (l - mx).exp();
        (a + w.sqrt(), b + w)
    });
    (1.0 - s_half / (log_weights.len() as f64 * s_one).sqrt()).max(0.0)
}

/// Hellinger distance, ESS/N and KL from weighted samples; `log_prior`
/// is the normalized prior density used for the KL estimate.
pub fn diagnostics_from_samples(
    samples: &WeightedSamples,
    log_prior: &dyn Fn(&DVector<f64>) -> f64,
) -> Result<Diagnostics> {
    let n = samples.points.len();
    let w = match samples.normalized_weights() {
        Ok(w) => w,
        Err(_) => {
            return Ok(Diagnostics {
                hellinger: f64::NAN,
                ess_fraction: 0.0,
                kl: f64::NAN,
                samples: n,
                flagged: true,
            })
        }
    };
    let kl = samples
        .points
        .iter()
        .zip(&w)
        .zip(&samples.log_q)
        .filter(|(_, lq)| lq.is_finite())
        .map(|((x, wi), lq)| wi * (lq - log_prior(x)))
        .sum::<f64>()
        / n as f64;
    Ok(Diagnostics {
        hellinger: hellinger_squared(&samples.log_weights).sqrt(),
        ess_fraction: ess_fraction(&samples.log_weights),
        kl,
        samples: n,
        flagged: false,
    })
}

/// Diagnostics of `map` against `log_target`, using the standard Gaussian as prior.
pub fn diagnostics(
    map: &dyn TransportMap,
    log_target: &(dyn Fn(&DVector<f64>) -> Result<f64> + Sync),
    n: usize,
    rng: &mut Stream,
) -> Result<Diagnostics> {
    if n < 2 {
        return Err(SoedError::InvalidInput("diagnostics need at least 2 samples".into()));
    }
    let s = weighted_samples(map, log_target, n, rng)?;
    diagnostics_from_samples(&s, &std_normal_logpdf)
}
