//! Campaign configuration (JSON).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoedError};
use crate::models::{
    EllipticDiffusivity, EllipticSettings, ForwardModel, GaussianPrior, LinearModel, NoiseModel,
    NonlinearToy, WhitenedModel,
};
use crate::rng::{standard_normal_vec, substream, tag};
use crate::soed::{DataSource, Problem, SoedSettings};

/// Gaussian prior given by mean and covariance; standard when omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: Option<Vec<f64>>,
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl PriorSpec {
    fn build(&self, n: usize) -> Result<GaussianPrior> {
        let mean = match &self.mean {
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(n),
        };
        let cov = match &self.covariance {
            Some(c) => matrix_from_rows(c, "prior covariance")?,
            None => DMatrix::identity(n, n),
        };
        if mean.len() != n || cov.nrows() != n {
            return Err(SoedError::Config(format!("prior dimension must be {n}")));
        }
        GaussianPrior::new(mean, cov)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `G(m) = matrix m`, rows grouped into candidates of `obs_dim` rows.
    Linear {
        matrix: Vec<Vec<f64>>,
        obs_dim: usize,
        #[serde(default)]
        prior: PriorSpec,
    },
    /// Smooth componentwise nonlinearity with a random mixing matrix.
    Toy {
        param_dim: usize,
        candidates: usize,
        obs_dim: usize,
        model_seed: u64,
        #[serde(default)]
        prior: PriorSpec,
    },
    /// Diffusivity field on the unit square observed at a sensor grid.
    Elliptic {
        #[serde(default)]
        settings: EllipticSettings,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Common standard deviation of every observation.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Standard deviations per candidate and observation.
    #[serde(default)]
    pub per_design: Option<Vec<Vec<f64>>>,
}

impl NoiseSpec {
    fn build(&self) -> Result<NoiseModel> {
        match (self.sigma, &self.per_design) {
            (Some(s), None) => NoiseModel::isotropic(s),
            (None, Some(p)) => NoiseModel::per_design(p.clone()),
            _ => Err(SoedError::Config("noise needs exactly one of `sigma` or `per_design`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Data synthesized from a ground truth, read from a vector file or
    /// drawn from the prior.
    Synthetic {
        #[serde(default)]
        truth_file: Option<PathBuf>,
    },
    /// One data vector file per stage.
    Files { files: Vec<PathBuf> },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { truth_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub model: ModelSpec,
    pub noise: NoiseSpec,
    pub stages: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub settings: SoedSettings,
    /// Worker threads for inner Monte Carlo loops; all cores when omitted.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(SoedError::Config(format!("{what} must be a nonempty rectangular array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Reads a vector from a little-endian `f64` binary file (`.bin`) or a
/// text file of numbers separated by commas or whitespace.
pub fn read_vector_file(path: &Path) -> Result<DVector<f64>> {
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        if bytes.len() % 8 != 0 {
            return Err(SoedError::InvalidInput(format!("{}: length is not a multiple of 8", path.display())));
        }
        let v = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        return Ok(DVector::from_vec(v));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| SoedError::InvalidInput(format!("{}: not UTF-8 text", path.display())))?;
    let v = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| SoedError::InvalidInput(format!("{}: bad number `{t}`", path.display())))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DVector::from_vec(v))
}

impl CampaignConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SoedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SoedError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| SoedError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(SoedError::Config("stages must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(SoedError::Config("workers must be positive".into()));
        }
        if let DataSpec::Files { files } = &self.data {
            if files.len() < self.stages {
                return Err(SoedError::Config(format!(
                    "{} data files given for {} stages",
                    files.len(),
                    self.stages
                )));
            }
        }
        match &self.model {
            ModelSpec::Linear { obs_dim, .. } | ModelSpec::Toy { obs_dim, .. } if *obs_dim == 0 => {
                return Err(SoedError::Config("obs_dim must be positive".into()))
            }
            ModelSpec::Elliptic { settings } if settings.nodes < 3 || settings.sensors_per_side == 0 => {
                return Err(SoedError::Config("elliptic mesh needs at least 3 nodes and 1 sensor".into()))
            }
            _ => {}
        }
        self.noise.build()?;
        self.settings.validate()
    }

    /// Rewrites relative data and output paths against `base`.
    pub fn with_absolute_paths(mut self, base: &Path) -> Self {
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        match &mut self.data {
            DataSpec::Synthetic { truth_file: Some(p) } => *p = abs(p),
            DataSpec::Files { files } => files.iter_mut().for_each(|p| *p = abs(p)),
            DataSpec::Synthetic { truth_file: None } => {}
        }
        if let Some(p) = &mut self.output_dir {
            *p = abs(p);
        }
        self
    }

    fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Builds the whitened model, the prior and the data source. Relative
    /// file paths resolve against `base`.
    pub fn build_problem(&self, base: &Path) -> Result<(Problem, GaussianPrior)> {
        let (model, prior): (Arc<dyn ForwardModel>, GaussianPrior) = match &self.model {
            ModelSpec::Linear { matrix, obs_dim, prior } => {
                let g = matrix_from_rows(matrix, "linear model matrix")?;
                let prior = prior.build(g.ncols())?;
                let model = LinearModel::new(g, *obs_dim)?;
                (Arc::new(WhitenedModel::new(model, prior.clone())?), prior)
            }
            ModelSpec::Toy {
                param_dim,
                candidates,
                obs_dim,
                model_seed,
                prior,
            } => {
                let prior = prior.build(*param_dim)?;
                let model = NonlinearToy::random(*param_dim, *candidates, *obs_dim, *model_seed)?;
                (Arc::new(WhitenedModel::new(model, prior.clone())?), prior)
            }
            ModelSpec::Elliptic { settings } => {
                let model = EllipticDiffusivity::new(settings.clone())?;
                let prior = model.prior()?;
                (Arc::new(WhitenedModel::new(model, prior.clone())?), prior)
            }
        };
        let nm = model.param_dim();
        let data = match &self.data {
            DataSpec::Synthetic { truth_file: None } => DataSource::Synthetic {
                truth: DVector::from_vec(standard_normal_vec(&mut substream(self.seed, &[tag::TRUTH]), nm)),
            },
            DataSpec::Synthetic { truth_file: Some(p) } => {
                let m = read_vector_file(&self.resolve(base, p))?;
                if m.len() != nm {
                    return Err(SoedError::dim("ground-truth file", nm, m.len()));
                }
                DataSource::Synthetic {
                    truth: prior.inverse_transform(&m)?,
                }
            }
            DataSpec::Files { files } => DataSource::Observed(
                files
                    .iter()
                    .map(|p| read_vector_file(&self.resolve(base, p)))
                    .collect::<Result<_>>()?,
            ),
        };
        let noise = self.noise.build()?;
        Ok((Problem::new(model, noise, data)?, prior))
    }
}
