//! Deep composition of KR layers guided by tempered bridging densities.

use log::debug;
use serde::{Deserialize, Serialize};

use super::basis::Basis1D;
use super::density::SquaredTtDensity;
use super::maps::{KrMap, Map};
use super::tt::{tt_cross_build, CrossReport, CrossSettings};
use crate::error::{Result, SoedError};
use crate::rng::Stream;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Basis, cross-interpolation and bridging settings for every TT layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSettings {
    pub basis_size: usize,
    pub half_width: f64,
    /// Defensive weight relative to the largest `f^2` seen during the build.
    pub tau_rel: f64,
    /// Tempering exponents of the bridging densities; the last must be 1.
    pub betas: Vec<f64>,
    pub cross: CrossSettings,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            basis_size: 30,
            half_width: 5.0,
            tau_rel: 1e-4,
            betas: vec![0.25, 0.5, 1.0],
            cross: CrossSettings::default(),
        }
    }
}

impl TransportSettings {
    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() || self.betas.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            return Err(SoedError::Config("tempering exponents must lie in (0, 1]".into()));
        }
        if self.betas.windows(2).any(|w| w[1] <= w[0]) || *self.betas.last().unwrap_or(&0.0) != 1.0 {
            return Err(SoedError::Config("tempering exponents must increase to 1".into()));
        }
        if !(self.tau_rel >= 0.0) {
            return Err(SoedError::Config("tau_rel must be nonnegative".into()));
        }
        if self.cross.max_rank == 0 || self.cross.sweeps == 0 || self.cross.init_rank == 0 {
            return Err(SoedError::Config("cross ranks and sweeps must be positive".into()));
        }
        Basis1D::new(self.basis_size, self.half_width).map(|_| ())
    }

    pub fn basis(&self) -> Result<Basis1D> {
        Basis1D::new(self.basis_size, self.half_width)
    }
}

/// Layers of a deep map, outermost first, with their build reports.
#[derive(Debug, Clone)]
pub struct DeepMap {
    pub layers: Vec<SquaredTtDensity>,
    pub reports: Vec<CrossReport>,
}

impl DeepMap {
    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn evaluations(&self) -> usize {
        self.reports.iter().map(|r| r.evaluations).sum()
    }

    pub fn converged(&self) -> bool {
        self.reports.iter().all(|r| r.converged)
    }

    pub fn into_map(self) -> Map {
        let mut layers: Vec<Map> = self.layers.into_iter().map(|d| Map::Kr(KrMap::new(d))).collect();
        if layers.len() == 1 {
            layers.pop().expect("one layer")
        } else {
            Map::Composed(layers)
        }
    }
}

fn std_normal_logpdf(x: &[f64]) -> f64 {
    x.iter().map(|v| -0.5 * v * v - LN_SQRT_2PI).sum()
}

/// Pushes `u` through layers (innermost applied first), returning the
/// point and the accumulated log-determinant.
fn apply_layers(layers: &[SquaredTtDensity], u: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut cur = u.to_vec();
    let mut total = 0.0;
    for layer in layers.iter().rev() {
        let (x, ld) = layer.transport_from(&layer.empty_prefix(), &cur)?;
        cur = x;
        total += ld;
    }
    Ok((cur, total))
}

/// Builds `T = Q^1 o ... o Q^L` approximating the density `exp(log_target)`.
///
/// Layer `l` approximates the pullback under the current composition of
/// the bridging density `pi_l ∝ (pi / rho)^{beta_l} rho`.
pub fn build_deep<F>(log_target: &F, dim: usize, settings: &TransportSettings, rng: &mut Stream) -> Result<DeepMap>
where
    F: Fn(&[f64]) -> f64,
{
    settings.validate()?;
    let basis = settings.basis()?;
    let mut layers: Vec<SquaredTtDensity> = Vec::new();
    let mut reports = Vec::new();
    for &beta in &settings.betas {
        let current = layers.clone();
        let pullback = |u: &[f64]| -> f64 {
            let (x, ld) = match apply_layers(&current, u) {
                Ok(v) => v,
                Err(_) => return f64::NAN,
            };
            let lt = log_target(&x);
            if lt == f64::NEG_INFINITY {
                return lt;
            }
            let lr = std_normal_logpdf(&x);
            beta * (lt - lr) + lr + ld
        };
        let (tt, report) = tt_cross_build(&pullback, dim, &basis, &settings.cross, rng)?;
        debug!(
            "deep layer beta={beta}: ranks {:?}, {} evaluations, held-out rms {:.3e}",
            report.ranks, report.evaluations, report.heldout_rms
        );
        let density = SquaredTtDensity::with_relative_tau(tt, settings.tau_rel, report.max_f2)?;
        layers.push(density);
        reports.push(report);
    }
    Ok(DeepMap { layers, reports })
}
