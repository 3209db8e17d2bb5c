use nalgebra::{DMatrix, DVector};

use super::{CandidateSet, ForwardModel};
use crate::error::{Result, SoedError};

/// `G(m) = G m` with rows grouped into designs of `Nd` consecutive rows.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub g: DMatrix<f64>,
    candidates: CandidateSet,
}

impl LinearModel {
    pub fn new(g: DMatrix<f64>, obs_dim: usize) -> Result<Self> {
        if obs_dim == 0 || !g.nrows().is_multiple_of(obs_dim) {
            return Err(SoedError::InvalidInput(format!(
                "{} rows cannot be split into designs of {obs_dim} observations",
                g.nrows()
            )));
        }
        let candidates = CandidateSet::indexed(g.nrows() / obs_dim, obs_dim)?;
        Ok(Self { g, candidates })
    }

    pub fn with_candidates(g: DMatrix<f64>, candidates: CandidateSet) -> Result<Self> {
        if candidates.total_obs() != g.nrows() {
            return Err(SoedError::dim("linear model rows", candidates.total_obs(), g.nrows()));
        }
        Ok(Self { g, candidates })
    }

    /// Rows of `G` belonging to design `e`.
    pub fn design_block(&self, e: usize) -> Result<DMatrix<f64>> {
        let rows = self.candidates.select_rows(e)?;
        Ok(self.g.rows(rows.start, rows.len()).into_owned())
    }
}

impl ForwardModel for LinearModel {
    fn param_dim(&self) -> usize {
        self.g.ncols()
    }

    fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        if m.len() != self.g.ncols() {
            return Err(SoedError::dim("linear model parameter", self.g.ncols(), m.len()));
        }
        Ok(&self.g * m)
    }

    fn jacobian(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        if m.len() != self.g.ncols() {
            return Err(SoedError::dim("linear model parameter", self.g.ncols(), m.len()));
        }
        Ok(self.g.clone())
    }
}
