//! Conditional (amortized) maps over joint data-parameter coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::deep::{build_deep, DeepMap, TransportSettings};
use super::density::SquaredTtDensity;
use super::maps::{FixedDataMap, Map, TransportMap};
use super::tt::CrossReport;
use crate::error::{Result, SoedError};
use crate::models::{log_likelihood_from_output, simulate_data, ForwardModel, NoiseModel};
use crate::rng::{standard_normal_vec, Stream};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-coordinate affine standardization of data: `z = (y - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataStandardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl DataStandardization {
    pub fn from_samples(samples: &[DVector<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(SoedError::InvalidInput("standardization needs at least 2 samples".into()));
        }
        let d = samples[0].len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for k in 0..d {
                var[k] += (s[k] - mean[k]).powi(2) / (n - 1) as f64;
            }
        }
        let scale = var.iter().map(|v| v.sqrt().max(1e-12)).collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn to_standard(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn from_standard(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }

    pub fn log_scale(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

/// Joint triangular map over (standardized data, reduced parameters), with
/// the LIS basis embedding the parameter block into the full space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalMap {
    /// Joint KR layers, outermost first; empty when the reduced dimension is 0.
    pub layers: Vec<SquaredTtDensity>,
    pub data_dim: usize,
    pub basis: DMatrix<f64>,
    pub standardization: DataStandardization,
    pub design: usize,
}

impl ConditionalMap {
    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn param_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// True when the data were uninformative and the map is the identity.
    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    /// Parameter map at observed data `y` (raw units), on the full space.
    pub fn at_data(&self, y: &DVector<f64>) -> Result<Map> {
        if y.len() != self.data_dim {
            return Err(SoedError::dim("conditional data", self.data_dim, y.len()));
        }
        if self.is_identity() {
            return Ok(Map::Identity(self.param_dim()));
        }
        let z = self.standardization.to_standard(y.as_slice());
        let fixed = FixedDataMap::new(self.layers.clone(), &z)?;
        Map::embedded(self.basis.clone(), Map::FixedData(fixed))
    }

    /// Pushes a joint reference sample through the joint map; returns raw
    /// data and reduced parameter coordinates.
    pub fn joint_forward(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.data_dim + self.reduced_dim();
        if u.len() != n {
            return Err(SoedError::dim("joint reference sample", n, u.len()));
        }
        if self.is_identity() {
            return Err(SoedError::InvalidInput("identity conditional map has no joint layers".into()));
        }
        let mut cur = u.to_vec();
        for layer in self.layers.iter().rev() {
            cur = layer.transport_from(&layer.empty_prefix(), &cur)?.0;
        }
        let y = self.standardization.from_standard(&cur[..self.data_dim]);
        Ok((y, cur[self.data_dim..].to_vec()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    pub layers: Vec<CrossReport>,
    pub model_solves: usize,
    /// Set when the reduced dimension was zero and the map is the identity.
    pub identity: bool,
}

/// Builds the stage conditional map for design `design`.
///
/// The joint target over standardized data `z` and reduced coordinates `w`
/// is `L(mean + scale z | T(U w), design) prod(scale) rho(w)`, where `T` is
/// the current posterior map in whitened coordinates.
#[allow(clippy::too_many_arguments)]
pub fn build_conditional_stage(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    current: &Map,
    design: usize,
    basis: &DMatrix<f64>,
    settings: &TransportSettings,
    standardize_samples: usize,
    rng: &mut Stream,
) -> Result<(ConditionalMap, ConditionalReport)> {
    let nm = model.param_dim();
    if basis.nrows() != nm || current.dim() != nm {
        return Err(SoedError::dim("conditional stage basis", nm, basis.nrows()));
    }
    let d = model.candidates().obs_dim;
    let r = basis.ncols();
    if r == 0 {
        return Ok((
            ConditionalMap {
                layers: vec![],
                data_dim: d,
                basis: basis.clone(),
                standardization: DataStandardization::identity(d),
                design,
            },
            ConditionalReport {
                identity: true,
                ..Default::default()
            },
        ));
    }
    let mut samples = Vec::with_capacity(standardize_samples);
    for _ in 0..standardize_samples.max(2) {
        let v = DVector::from_vec(standard_normal_vec(rng, nm));
        let m = current.forward(&v)?;
        samples.push(simulate_data(model, noise, &m, design, rng)?);
    }
    let std = DataStandardization::from_samples(&samples)?;
    let log_scale = std.log_scale();
    let target = |x: &[f64]| -> f64 {
        let y = DVector::from_vec(std.from_standard(&x[..d]));
        let w = DVector::from_column_slice(&x[d..]);
        let v = basis * &w;
        let ll = current
            .forward(&v)
            .and_then(|m| model.evaluate_design(design, &m))
            .and_then(|g| log_likelihood_from_output(noise, design, &g, &y));
        match ll {
            Ok(ll) => ll + log_scale - 0.5 * w.norm_squared() - r as f64 * LN_SQRT_2PI,
            Err(_) => f64::NAN,
        }
    };
    let DeepMap { layers, reports } = build_deep(&target, d + r, settings, rng)?;
    let solves = standardize_samples.max(2) + reports.iter().map(|r| r.evaluations).sum::<usize>();
    Ok((
        ConditionalMap {
            layers,
            data_dim: d,
            basis: basis.clone(),
            standardization: std,
            design,
        },
        ConditionalReport {
            layers: reports,
            model_solves: solves,
            identity: false,
        },
    ))
}
