use nalgebra::{DMatrix, DVector};

use super::{CandidateSet, ForwardModel};
use crate::error::{Result, SoedError};
use crate::rng::{standard_normal_vec, substream};

/// `G(m) = A phi(m)` with the componentwise nonlinearity `phi(t) = sin(t) + t / 2`.
#[derive(Debug, Clone)]
pub struct NonlinearToy {
    pub a: DMatrix<f64>,
    candidates: CandidateSet,
}

fn phi(t: f64) -> f64 {
    t.sin() + 0.5 * t
}

fn dphi(t: f64) -> f64 {
    t.cos() + 0.5
}

impl NonlinearToy {
    pub const MAX_PARAMS: usize = 10;

    pub fn new(a: DMatrix<f64>, obs_dim: usize) -> Result<Self> {
        if a.ncols() == 0 || a.ncols() > Self::MAX_PARAMS {
            return Err(SoedError::InvalidInput(format!(
                "nonlinear toy supports 1..={} parameters, got {}",
                Self::MAX_PARAMS,
                a.ncols()
            )));
        }
        if obs_dim == 0 || !a.nrows().is_multiple_of(obs_dim) {
            return Err(SoedError::InvalidInput(format!(
                "{} rows cannot be split into designs of {obs_dim} observations",
                a.nrows()
            )));
        }
        let candidates = CandidateSet::indexed(a.nrows() / obs_dim, obs_dim)?;
        Ok(Self { a, candidates })
    }

    /// Coupling matrix with standard Gaussian entries drawn from `seed`.
    pub fn random(param_dim: usize, designs: usize, obs_dim: usize, seed: u64) -> Result<Self> {
        let rows = designs * obs_dim;
        let mut rng = substream(seed, &[]);
        let a = DMatrix::from_vec(rows, param_dim, standard_normal_vec(&mut rng, rows * param_dim));
        Self::new(a, obs_dim)
    }

    fn check(&self, m: &DVector<f64>) -> Result<()> {
        if m.len() != self.a.ncols() {
            return Err(SoedError::dim("toy model parameter", self.a.ncols(), m.len()));
        }
        Ok(())
    }
}

impl ForwardModel for NonlinearToy {
    fn param_dim(&self) -> usize {
        self.a.ncols()
    }

    fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(m)?;
        Ok(&self.a * m.map(phi))
    }

    fn jacobian(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        let d = m.map(dphi);
        let mut j = self.a.clone();
        for (c, dc) in d.iter().enumerate() {
            j.column_mut(c).scale_mut(*dc);
        }
        Ok(j)
    }
}
