use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_finite, CandidateSet, ForwardModel, GaussianPrior};
use crate::error::{Result, SoedError};

/// Mesh, sensor grid and prior kernel of the diffusivity problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticSettings {
    /// Nodes per side of the unit square.
    pub nodes: usize,
    /// Sensors per side of the equally spaced candidate grid.
    pub sensors_per_side: usize,
    /// Correlation length of the squared-exponential prior kernel.
    pub kernel_length: f64,
}

impl Default for EllipticSettings {
    fn default() -> Self {
        Self {
            nodes: 17,
            sensors_per_side: 5,
            kernel_length: 1.0 / 50f64.sqrt(),
        }
    }
}

/// Symmetric banded matrix with Cholesky factorization in band storage.
struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// `band[i * (bw + 1) + d]` holds `A(i, i - d)`.
    fn factor(n: usize, bw: usize, mut band: Vec<f64>) -> Result<Self> {
        let w = bw + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = band[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(SoedError::ModelEvaluation(
                            "stiffness matrix is not positive definite".into(),
                        ));
                    }
                    band[i * w] = s.sqrt();
                } else {
                    band[i * w + (i - j)] = s / band[j * w];
                }
            }
        }
        Ok(Self { n, bw, l: band })
    }

    fn solve(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in (i + 1)..(i + self.bw + 1).min(self.n) {
                s -= self.l[k * w + (k - i)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
    }
}

/// An edge between two adjacent mesh nodes with its geometric weight.
#[derive(Debug, Clone, Copy)]
struct Edge {
    a: usize,
    b: usize,
    weight: f64,
}

/// `-div(exp(m) grad u) = 0` on the unit square, discretized by a
/// five-point finite-volume stencil. Dirichlet data `u = 1 + y/2` on the
/// left and `u = -sin(2 pi y) - 1` on the right, no-flux top and bottom.
/// Parameters are nodal log-diffusivities; observables are `u` at the
/// sensor nodes, one candidate design per sensor.
#[derive(Debug, Clone)]
pub struct EllipticDiffusivity {
    settings: EllipticSettings,
    candidates: CandidateSet,
    sensors: Vec<usize>,
    edges: Vec<Edge>,
}

impl EllipticDiffusivity {
    pub fn new(settings: EllipticSettings) -> Result<Self> {
        let n = settings.nodes;
        if n < 4 {
            return Err(SoedError::InvalidInput("elliptic mesh needs at least 4 nodes per side".into()));
        }
        let s = settings.sensors_per_side;
        if s == 0 || s > n - 2 {
            return Err(SoedError::InvalidInput(format!(
                "sensors per side must be in 1..={}",
                n - 2
            )));
        }
        if !(settings.kernel_length > 0.0) {
            return Err(SoedError::InvalidInput("kernel length must be positive".into()));
        }
        let h = 1.0 / (n - 1) as f64;
        let pos = |k: usize| ((k as f64 + 0.5) / s as f64 * (n - 1) as f64).round() as usize;
        let mut sensors = Vec::with_capacity(s * s);
        let mut labels = Vec::with_capacity(s * s);
        for kx in 0..s {
            for ky in 0..s {
                let i = pos(kx).clamp(1, n - 2);
                let j = pos(ky);
                sensors.push(i * n + j);
                labels.push(format!("({:.4},{:.4})", i as f64 * h, j as f64 * h));
            }
        }
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            for j in 0..n {
                let weight = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                edges.push(Edge {
                    a: i * n + j,
                    b: (i + 1) * n + j,
                    weight,
                });
            }
        }
        for i in 1..n - 1 {
            for j in 0..n - 1 {
                edges.push(Edge {
                    a: i * n + j,
                    b: i * n + j + 1,
                    weight: 1.0,
                });
            }
        }
        let candidates = CandidateSet::new(s * s, 1, labels)?;
        Ok(Self {
            settings,
            candidates,
            sensors,
            edges,
        })
    }

    pub fn settings(&self) -> &EllipticSettings {
        &self.settings
    }

    /// Node coordinates in parameter order (`x`-major).
    pub fn node_coordinates(&self) -> Vec<[f64; 2]> {
        let n = self.settings.nodes;
        let h = 1.0 / (n - 1) as f64;
        (0..n * n).map(|p| [(p / n) as f64 * h, (p % n) as f64 * h]).collect()
    }

    /// Squared-exponential prior on the mesh nodes.
    pub fn prior(&self) -> Result<GaussianPrior> {
        GaussianPrior::squared_exponential(&self.node_coordinates(), self.settings.kernel_length)
    }

    /// Mesh node index of each sensor.
    pub fn sensor_nodes(&self) -> &[usize] {
        &self.sensors
    }

    fn dirichlet_value(&self, node: usize) -> Option<f64> {
        let n = self.settings.nodes;
        let (i, j) = (node / n, node % n);
        let y = j as f64 / (n - 1) as f64;
        if i == 0 {
            Some(1.0 + 0.5 * y)
        } else if i == n - 1 {
            Some(-(2.0 * std::f64::consts::PI * y).sin() - 1.0)
        } else {
            None
        }
    }

    /// Unknown index of a node, or `None` for Dirichlet nodes.
    fn unknown(&self, node: usize) -> Option<usize> {
        let n = self.settings.nodes;
        let i = node / n;
        (i > 0 && i < n - 1).then(|| node - n)
    }

    fn assemble(&self, kappa: &[f64]) -> Result<(BandCholesky, Vec<f64>)> {
        let n = self.settings.nodes;
        let nu = (n - 2) * n;
        let bw = n;
        let w = bw + 1;
        let mut band = vec![0.0; nu * w];
        let mut rhs = vec![0.0; nu];
        for e in &self.edges {
            let c = e.weight * 0.5 * (kappa[e.a] + kappa[e.b]);
            match (self.unknown(e.a), self.unknown(e.b)) {
                (Some(ia), Some(ib)) => {
                    band[ia * w] += c;
                    band[ib * w] += c;
                    let (hi, lo) = if ia > ib { (ia, ib) } else { (ib, ia) };
                    band[hi * w + (hi - lo)] -= c;
                }
                (Some(ia), None) => {
                    band[ia * w] += c;
                    rhs[ia] += c * self.dirichlet_value(e.b).unwrap_or(0.0);
                }
                (None, Some(ib)) => {
                    band[ib * w] += c;
                    rhs[ib] += c * self.dirichlet_value(e.a).unwrap_or(0.0);
                }
                (None, None) => {}
            }
        }
        Ok((BandCholesky::factor(nu, bw, band)?, rhs))
    }

    fn kappa(&self, m: &DVector<f64>) -> Result<Vec<f64>> {
        let n = self.settings.nodes;
        if m.len() != n * n {
            return Err(SoedError::dim("elliptic parameter", n * n, m.len()));
        }
        let kappa: Vec<f64> = m.iter().map(|v| v.exp()).collect();
        if kappa.iter().any(|k| !k.is_finite() || *k <= 0.0) {
            return Err(SoedError::ModelEvaluation("diffusivity overflow".into()));
        }
        Ok(kappa)
    }

    /// Full nodal pressure field at `m`.
    pub fn solve(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        let kappa = self.kappa(m)?;
        let (chol, mut rhs) = self.assemble(&kappa)?;
        chol.solve(&mut rhs);
        Ok(self.full_field(&rhs))
    }

    fn full_field(&self, unknowns: &[f64]) -> DVector<f64> {
        let n = self.settings.nodes;
        DVector::from_fn(n * n, |p, _| match self.unknown(p) {
            Some(k) => unknowns[k],
            None => self.dirichlet_value(p).unwrap_or(0.0),
        })
    }
}

impl ForwardModel for EllipticDiffusivity {
    fn param_dim(&self) -> usize {
        self.settings.nodes * self.settings.nodes
    }

    fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.solve(m)?;
        let out = DVector::from_iterator(self.sensors.len(), self.sensors.iter().map(|&s| u[s]));
        check_finite("elliptic solve", &out)?;
        Ok(out)
    }

    fn jacobian(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.evaluate_with_jacobian(m)?.1)
    }

    fn evaluate_with_jacobian(&self, m: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let kappa = self.kappa(m)?;
        let (chol, mut rhs) = self.assemble(&kappa)?;
        chol.solve(&mut rhs);
        let u = self.full_field(&rhs);
        let nu = rhs.len();
        let nm = self.param_dim();
        let mut jac = DMatrix::zeros(self.sensors.len(), nm);
        let mut lambda = vec![0.0; nu];
        for (row, &s) in self.sensors.iter().enumerate() {
            lambda.iter_mut().for_each(|v| *v = 0.0);
            let k = self.unknown(s).ok_or_else(|| {
                SoedError::InvalidInput("sensor placed on a Dirichlet boundary".into())
            })?;
            lambda[k] = 1.0;
            chol.solve(&mut lambda);
            let lam = |p: usize| self.unknown(p).map_or(0.0, |k| lambda[k]);
            for e in &self.edges {
                let t = (lam(e.a) - lam(e.b)) * (u[e.a] - u[e.b]);
                if t != 0.0 {
                    jac[(row, e.a)] -= 0.5 * e.weight * kappa[e.a] * t;
                    jac[(row, e.b)] -= 0.5 * e.weight * kappa[e.b] * t;
                }
            }
        }
        let out = DVector::from_iterator(self.sensors.len(), self.sensors.iter().map(|&s| u[s]));
        check_finite("elliptic solve", &out)?;
        Ok((out, jac))
    }
}
