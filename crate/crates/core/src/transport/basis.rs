//! One-dimensional polynomial basis and truncated Gaussian reference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc, erfc_inv};

use crate::error::{Result, SoedError};
use crate::linalg::gauss_legendre;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Lagrange polynomials on Chebyshev-Gauss-Lobatto nodes of `[-L, L]`,
/// together with the truncated standard Gaussian reference on that interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "BasisSpec", into = "BasisSpec")]
pub struct Basis1D {
    size: usize,
    half_width: f64,
    nodes: Vec<f64>,
    bary: Vec<f64>,
    /// `phi_j(x) = sum_a to_cheb[(j, a)] T_a(x / L)`.
    to_cheb: DMatrix<f64>,
    mass: DMatrix<f64>,
    /// Upper Cholesky factor `R` with `R^T R = mass`.
    mass_factor: DMatrix<f64>,
    log_ref_norm: f64,
    ref_lower_cdf: f64,
    ref_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub size: usize,
    pub half_width: f64,
}

impl From<BasisSpec> for Basis1D {
    fn from(s: BasisSpec) -> Self {
        Basis1D::new(s.size, s.half_width).expect("serialized basis spec is valid")
    }
}

impl From<Basis1D> for BasisSpec {
    fn from(b: Basis1D) -> Self {
        BasisSpec {
            size: b.size,
            half_width: b.half_width,
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn std_normal_inv_cdf(p: f64) -> f64 {
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    // Polish the library inverse, which is only accurate to ~1e-11.
    for _ in 0..2 {
        let pdf = (-0.5 * x * x - LN_SQRT_2PI).exp();
        if pdf > 0.0 && x.is_finite() {
            x -= (std_normal_cdf(x) - p) / pdf;
        }
    }
    x
}

impl Basis1D {
    pub fn new(size: usize, half_width: f64) -> Result<Self> {
        if size < 2 {
            return Err(SoedError::InvalidInput("basis needs at least 2 nodes".into()));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(SoedError::InvalidInput("domain half-width must be positive".into()));
        }
        let n = size - 1;
        let pi = std::f64::consts::PI;
        let nodes: Vec<f64> = (0..size)
            .map(|j| half_width * (pi * j as f64 / n as f64).cos())
            .collect();
        let bary: Vec<f64> = (0..size)
            .map(|j| {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == n {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        let to_cheb = DMatrix::from_fn(size, size, |j, a| {
            let cj = if j == 0 || j == n { 0.5 } else { 1.0 };
            let ca = if a == 0 || a == n { 0.5 } else { 1.0 };
            2.0 / n as f64 * cj * ca * (pi * (j * a) as f64 / n as f64).cos()
        });
        let (gx, gw) = gauss_legendre(size);
        let mut mass = DMatrix::zeros(size, size);
        let mut phi = vec![0.0; size];
        let mut tmp = Self {
            size,
            half_width,
            nodes,
            bary,
            to_cheb,
            mass: DMatrix::zeros(0, 0),
            mass_factor: DMatrix::zeros(0, 0),
            log_ref_norm: 0.0,
            ref_lower_cdf: 0.0,
            ref_mass: 0.0,
        };
        for (x, w) in gx.iter().zip(&gw) {
            tmp.eval_into(half_width * x, &mut phi);
            for i in 0..size {
                for j in 0..size {
                    mass[(i, j)] += half_width * w * phi[i] * phi[j];
                }
            }
        }
        let mass_factor = nalgebra::Cholesky::new(mass.clone())
            .ok_or_else(|| SoedError::Numerical("basis mass matrix not positive definite".into()))?
            .l()
            .transpose();
        let ref_mass = erf(half_width / SQRT_2);
        tmp.mass = mass;
        tmp.mass_factor = mass_factor;
        tmp.log_ref_norm = ref_mass.ln();
        tmp.ref_lower_cdf = std_normal_cdf(-half_width);
        tmp.ref_mass = ref_mass;
        Ok(tmp)
    }

    pub fn spec(&self) -> BasisSpec {
        BasisSpec {
            size: self.size,
            half_width: self.half_width,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn to_chebyshev(&self) -> &DMatrix<f64> {
        &self.to_cheb
    }

    /// `M_ij = int phi_i phi_j` over the domain.
    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn mass_factor(&self) -> &DMatrix<f64> {
        &self.mass_factor
    }

    /// Index of the node closest to `x`.
    pub fn nearest_node(&self, x: f64) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (j, &n) in self.nodes.iter().enumerate() {
            if (n - x).abs() < dist {
                dist = (n - x).abs();
                best = j;
            }
        }
        best
    }

    /// Values of all basis functions at `x` (clamped to the domain).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let x = x.clamp(-self.half_width, self.half_width);
        let mut denom = 0.0;
        for j in 0..self.size {
            let d = x - self.nodes[j];
            if d == 0.0 {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[j] = 1.0;
                return;
            }
            out[j] = self.bary[j] / d;
            denom += out[j];
        }
        for v in out.iter_mut() {
            *v /= denom;
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        self.eval_into(x, &mut out);
        out
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(-self.half_width, self.half_width)
    }

    pub fn ref_logpdf(&self, x: f64) -> f64 {
        if x.abs() > self.half_width {
            return f64::NEG_INFINITY;
        }
        -0.5 * x * x - LN_SQRT_2PI - self.log_ref_norm
    }

    pub fn ref_pdf(&self, x: f64) -> f64 {
        self.ref_logpdf(x).exp()
    }

    pub fn ref_cdf(&self, x: f64) -> f64 {
        let x = self.clamp(x);
        ((std_normal_cdf(x) - self.ref_lower_cdf) / self.ref_mass).clamp(0.0, 1.0)
    }

    pub fn ref_inv_cdf(&self, z: f64) -> f64 {
        let p = self.ref_lower_cdf + z.clamp(0.0, 1.0) * self.ref_mass;
        self.clamp(std_normal_inv_cdf(p))
    }
}

/// Chebyshev series helpers on `[-1, 1]`.
pub(crate) mod cheb {
    /// `sum_n c_n T_n(s)` by Clenshaw recurrence.
    pub fn eval(c: &[f64], s: f64) -> f64 {
        let (mut b1, mut b2) = (0.0, 0.0);
        for &ck in c.iter().skip(1).rev() {
            let b0 = 2.0 * s * b1 - b2 + ck;
            b2 = b1;
            b1 = b0;
        }
        s * b1 - b2 + c.first().copied().unwrap_or(0.0)
    }

    /// Coefficients of an antiderivative of `sum_n c_n T_n`.
    pub fn integral(c: &[f64]) -> Vec<f64> {
        let n = c.len();
        let mut d = vec![0.0; n + 1];
        for (k, &ck) in c.iter().enumerate() {
            match k {
                0 => d[1] += ck,
                1 => d[2] += 0.25 * ck,
                _ => {
                    d[k + 1] += ck / (2.0 * (k + 1) as f64);
                    d[k - 1] -= ck / (2.0 * (k - 1) as f64);
                }
            }
        }
        d
    }

    /// Coefficients of `sum_{a,b} g[(a,b)] T_a T_b` for a symmetric `g`
    /// given as a dense row-major slice of size `m x m`.
    pub fn quadratic_form(g: &[f64], m: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..m {
            out[2 * a] += 0.5 * g[a * m + a];
            out[0] += 0.5 * g[a * m + a];
            for b in (a + 1)..m {
                let v = g[a * m + b];
                out[a + b] += v;
                out[b - a] += v;
            }
        }
    }
}
