//! Squared tensor-train densities and their Knothe-Rosenblatt maps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::{cheb, Basis1D};
use super::tt::FunctionalTt;
use crate::error::{Result, SoedError};
use crate::linalg::psd_factor;

/// CDF values are kept inside `[Z_CLAMP, 1 - Z_CLAMP]` before inversion.
pub const Z_CLAMP: f64 = 1e-12;

#[derive(Serialize, Deserialize)]
struct DensityParts {
    tt: FunctionalTt,
    tau: f64,
}

/// `p(x) = f(x)^2 + tau * rho(x)` with `f` a functional tensor train and
/// `rho` the product truncated Gaussian reference; normalized by `xi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "DensityParts", into = "DensityParts")]
pub struct SquaredTtDensity {
    tt: FunctionalTt,
    tau: f64,
    xi: f64,
    /// Per coordinate: `left x (M * r)` matrix holding the Chebyshev
    /// coefficients of `G_k(x) F_k`, where `F_k F_k^T` is the suffix Gram.
    cheb_cores: Vec<DMatrix<f64>>,
}

impl From<DensityParts> for SquaredTtDensity {
    fn from(p: DensityParts) -> Self {
        SquaredTtDensity::new(p.tt, p.tau).expect("serialized density is valid")
    }
}

impl From<SquaredTtDensity> for DensityParts {
    fn from(d: SquaredTtDensity) -> Self {
        DensityParts { tt: d.tt, tau: d.tau }
    }
}

/// Running state of a left-to-right pass: the (normalized) row vector of
/// the core product over the consumed coordinates.
#[derive(Debug, Clone)]
pub struct Prefix {
    ell: DVector<f64>,
    log_scale: f64,
    log_ref: f64,
    dead: bool,
    consumed: usize,
}

impl Prefix {
    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

/// One-dimensional conditional density `x_k | x_{<k}` as a Chebyshev series
/// plus a scaled reference term.
struct Conditional<'a> {
    basis: &'a Basis1D,
    c: Vec<f64>,
    d: Vec<f64>,
    d_lo: f64,
    tau: f64,
    z: f64,
}

impl Conditional<'_> {
    fn pdf(&self, t: f64) -> f64 {
        let l = self.basis.half_width();
        let poly = cheb::eval(&self.c, (t / l).clamp(-1.0, 1.0)).max(0.0);
        (poly + self.tau * self.basis.ref_pdf(t)) / self.z
    }

    fn cdf(&self, t: f64) -> f64 {
        let l = self.basis.half_width();
        let t = self.basis.clamp(t);
        let poly = l * (cheb::eval(&self.d, t / l) - self.d_lo);
        ((poly + self.tau * self.basis.ref_cdf(t)) / self.z).clamp(0.0, 1.0)
    }

    /// Solves `cdf(t) = z` by Newton steps safeguarded with bisection.
    fn invert(&self, z: f64) -> f64 {
        let l = self.basis.half_width();
        let (mut lo, mut hi) = (-l, l);
        let mut t = self.basis.ref_inv_cdf(z);
        for _ in 0..200 {
            let f = self.cdf(t) - z;
            if f.abs() < 1e-15 {
                break;
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            if hi - lo < 1e-14 * l {
                break;
            }
            let p = self.pdf(t);
            let newton = t - f / p;
            t = if p > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        t
    }
}

impl SquaredTtDensity {
    pub fn new(tt: FunctionalTt, tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(SoedError::InvalidInput("defensive weight must be nonnegative".into()));
        }
        let grams = tt.suffix_grams();
        let xi = tt.integral_squared().max(0.0) + tau;
        if !(xi > 1e-300) {
            return Err(SoedError::Numerical(format!("density normalizer underflow ({xi:.3e})")));
        }
        let m = tt.basis.size();
        let v = tt.basis.to_chebyshev();
        let cheb_cores = tt
            .cores
            .iter()
            .zip(&grams)
            .map(|(core, gram)| {
                let f = psd_factor(gram);
                let r = f.ncols();
                let scaled: Vec<DMatrix<f64>> = core.values.iter().map(|g| g * &f).collect();
                let mut out = DMatrix::zeros(core.left, m * r);
                for a in 0..m {
                    for (j, s) in scaled.iter().enumerate() {
                        let w = v[(j, a)];
                        if w != 0.0 {
                            let mut block = out.columns_mut(a * r, r);
                            block.zip_apply(s, |o, x| *o += w * x);
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            tt,
            tau,
            xi,
            cheb_cores,
        })
    }

    /// Uses `tau = tau_rel * max_f2`.
    pub fn with_relative_tau(tt: FunctionalTt, tau_rel: f64, max_f2: f64) -> Result<Self> {
        Self::new(tt, tau_rel * max_f2)
    }

    pub fn dim(&self) -> usize {
        self.tt.dim()
    }

    pub fn tt(&self) -> &FunctionalTt {
        &self.tt
    }

    pub fn basis(&self) -> &Basis1D {
        &self.tt.basis
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn normalizer(&self) -> f64 {
        self.xi
    }

    /// Unnormalized `f(x)^2 + tau rho(x)`.
    pub fn unnormalized(&self, x: &[f64]) -> f64 {
        let f = self.tt.eval(x);
        let log_ref: f64 = x.iter().map(|&t| self.basis().ref_logpdf(t)).sum();
        f * f + self.tau * log_ref.exp()
    }

    pub fn empty_prefix(&self) -> Prefix {
        Prefix {
            ell: DVector::from_element(1, 1.0),
            log_scale: 0.0,
            log_ref: 0.0,
            dead: false,
            consumed: 0,
        }
    }

    fn conditional(&self, p: &Prefix) -> Conditional<'_> {
        let k = p.consumed;
        let basis = self.basis();
        let m = basis.size();
        let l = basis.half_width();
        if p.dead {
            return Conditional {
                basis,
                c: vec![0.0],
                d: vec![0.0, 0.0],
                d_lo: 0.0,
                tau: 1.0,
                z: 1.0,
            };
        }
        let b = self.cheb_cores[k].tr_mul(&p.ell);
        let r = b.len() / m;
        let mut g = vec![0.0; m * m];
        for a in 0..m {
            let ba = b.rows(a * r, r);
            for c in a..m {
                let v = ba.dot(&b.rows(c * r, r));
                g[a * m + c] = v;
                g[c * m + a] = v;
            }
        }
        let mut c = vec![0.0; 2 * m - 1];
        cheb::quadratic_form(&g, m, &mut c);
        let d = cheb::integral(&c);
        let d_lo = cheb::eval(&d, -1.0);
        let poly_mass = (l * (cheb::eval(&d, 1.0) - d_lo)).max(0.0);
        let tau = (self.tau.ln() + p.log_ref - 2.0 * p.log_scale).exp();
        let tau = if self.tau == 0.0 { 0.0 } else { tau };
        let z = poly_mass + tau;
        if !(z > 0.0) || !z.is_finite() {
            return Conditional {
                basis,
                c: vec![0.0],
                d: vec![0.0, 0.0],
                d_lo: 0.0,
                tau: 1.0,
                z: 1.0,
            };
        }
        Conditional {
            basis,
            c,
            d,
            d_lo,
            tau,
            z,
        }
    }

    fn advance(&self, p: &mut Prefix, x: f64) {
        let k = p.consumed;
        let basis = self.basis();
        p.log_ref += basis.ref_logpdf(x);
        p.consumed += 1;
        if p.dead || p.consumed == self.dim() {
            return;
        }
        let phi = basis.eval(x);
        let core = self.tt.cores[k].contract(&phi);
        let next = core.tr_mul(&p.ell);
        let n = next.norm();
        if n > 0.0 && n.is_finite() {
            p.log_scale += n.ln();
            p.ell = next / n;
        } else {
            p.dead = true;
        }
    }

    /// Consumes fixed leading coordinates; returns the state and the log
    /// marginal density of those coordinates.
    pub fn prefix(&self, x: &[f64]) -> Result<(Prefix, f64)> {
        let mut p = self.empty_prefix();
        let (_, logpdf) = self.advance_uniform(&mut p, x)?;
        Ok((p, logpdf))
    }

    /// Reference coordinates of a leading block `x`: `u = R^{-1}(F(x))`.
    pub fn untransport_prefix(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.empty_prefix();
        let (z, _) = self.advance_uniform(&mut p, x)?;
        let basis = self.basis();
        Ok(z.iter()
            .map(|&v| basis.ref_inv_cdf(v.clamp(Z_CLAMP, 1.0 - Z_CLAMP)))
            .collect())
    }

    /// Consumes coordinates `x`, returning their conditional CDF values and
    /// conditional log density.
    pub fn advance_uniform(&self, p: &mut Prefix, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if p.consumed + x.len() > self.dim() {
            return Err(SoedError::dim("density coordinates", self.dim() - p.consumed, x.len()));
        }
        let mut z = Vec::with_capacity(x.len());
        let mut logpdf = 0.0;
        for &xk in x {
            let xk = self.basis().clamp(xk);
            let cond = self.conditional(p);
            z.push(cond.cdf(xk));
            logpdf += cond.pdf(xk).ln();
            self.advance(p, xk);
        }
        Ok((z, logpdf))
    }

    /// Inverts conditional CDFs for coordinates with values `z`, consuming them.
    pub fn advance_inverse(&self, p: &mut Prefix, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if p.consumed + z.len() > self.dim() {
            return Err(SoedError::dim("density coordinates", self.dim() - p.consumed, z.len()));
        }
        let mut x = Vec::with_capacity(z.len());
        let mut logpdf = 0.0;
        for &zk in z {
            let zk = zk.clamp(Z_CLAMP, 1.0 - Z_CLAMP);
            let cond = self.conditional(p);
            let xk = cond.invert(zk);
            logpdf += cond.pdf(xk).ln();
            x.push(xk);
            self.advance(p, xk);
        }
        Ok((x, logpdf))
    }

    /// Maps all remaining coordinates to conditional CDF values.
    pub fn to_uniform_from(&self, p: &Prefix, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if p.consumed + x.len() != self.dim() {
            return Err(SoedError::dim("density coordinates", self.dim() - p.consumed, x.len()));
        }
        self.advance_uniform(&mut p.clone(), x)
    }

    /// Inverts conditional CDFs for all remaining coordinates.
    pub fn from_uniform_from(&self, p: &Prefix, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if p.consumed + z.len() != self.dim() {
            return Err(SoedError::dim("density coordinates", self.dim() - p.consumed, z.len()));
        }
        self.advance_inverse(&mut p.clone(), z)
    }

    /// Normalized log density `log(p(x) / xi)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.iter().any(|v| v.abs() > self.basis().half_width()) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.to_uniform_from(&self.empty_prefix(), x)?.1)
    }

    /// Reference -> target with fixed prefix: `x = F^{-1}(R(u))` on the
    /// remaining coordinates. Returns `x` and `log |det dx/du|`.
    pub fn transport_from(&self, p: &Prefix, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        let basis = self.basis();
        let z: Vec<f64> = u.iter().map(|&v| basis.ref_cdf(v)).collect();
        let (x, logpdf) = self.from_uniform_from(p, &z)?;
        let log_ref: f64 = u.iter().map(|&v| basis.ref_logpdf(basis.clamp(v))).sum();
        Ok((x, log_ref - logpdf))
    }

    /// Target -> reference with fixed prefix. Returns `u` and `log |det du/dx|`.
    pub fn untransport_from(&self, p: &Prefix, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let basis = self.basis();
        let (z, logpdf) = self.to_uniform_from(p, x)?;
        let u: Vec<f64> = z
            .iter()
            .map(|&v| basis.ref_inv_cdf(v.clamp(Z_CLAMP, 1.0 - Z_CLAMP)))
            .collect();
        let log_ref: f64 = u.iter().map(|&v| basis.ref_logpdf(v)).sum();
        Ok((u, logpdf - log_ref))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gauss_legendre;
    use crate::rng::substream;
    use crate::transport::tt::{tt_cross_build, CrossSettings, Core};

    fn gaussian_density(dim: usize, corr: f64) -> SquaredTtDensity {
        gaussian_density_with(dim, corr, &CrossSettings::default(), 1e-4)
    }

    fn gaussian_density_with(dim: usize, corr: f64, settings: &CrossSettings, tau_rel: f64) -> SquaredTtDensity {
        let basis = Basis1D::new(30, 5.0).unwrap();
        let target = move |x: &[f64]| {
            let mut s = x[0] * x[0];
            for k in 1..x.len() {
                let r = x[k] - corr * x[k - 1];
                s += r * r / (1.0 - corr * corr);
            }
            -0.5 * s
        };
        let (tt, rep) =
            tt_cross_build(&target, dim, &basis, settings, &mut substream(5, &[])).unwrap();
        SquaredTtDensity::with_relative_tau(tt, tau_rel, rep.max_f2).unwrap()
    }

    #[test]
    fn pure_defensive_term_is_reference() {
        let basis = Basis1D::new(8, 5.0).unwrap();
        let zero = Core {
            left: 1,
            right: 1,
            values: vec![DMatrix::zeros(1, 1); 8],
        };
        let tt = FunctionalTt {
            basis: basis.clone(),
            cores: vec![zero.clone(), zero],
        };
        let d = SquaredTtDensity::new(tt, 0.7).unwrap();
        let x = [0.3, -1.2];
        let expect = basis.ref_logpdf(0.3) + basis.ref_logpdf(-1.2);
        assert!((d.log_density(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn normalized_in_two_dimensions() {
        let d = gaussian_density(2, 0.5);
        let (gx, gw) = gauss_legendre(60);
        let mut total = 0.0;
        for (x, wx) in gx.iter().zip(&gw) {
            for (y, wy) in gx.iter().zip(&gw) {
                total += 25.0 * wx * wy * d.log_density(&[5.0 * x, 5.0 * y]).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-8, "total {total}");
    }

    #[test]
    fn telescoped_density_matches_direct() {
        let d = gaussian_density(3, 0.6);
        for x in [[0.1, 0.2, -0.3], [1.5, -0.4, 2.0]] {
            let direct = (d.unnormalized(&x) / d.normalizer()).ln();
            assert!((d.log_density(&x).unwrap() - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn marginal_matches_gaussian() {
        let settings = CrossSettings {
            tolerance: 1e-8,
            sweeps: 6,
            ..CrossSettings::default()
        };
        let d = gaussian_density_with(3, 0.5, &settings, 0.0);
        let (gx, gw) = gauss_legendre(40);
        for x in [-1.0, 0.0, 0.7, 2.0] {
            let (_, lp) = d.prefix(&[x]).unwrap();
            let mut quad = 0.0;
            for (y, wy) in gx.iter().zip(&gw) {
                for (z, wz) in gx.iter().zip(&gw) {
                    quad += 25.0 * wy * wz * d.unnormalized(&[x, 5.0 * y, 5.0 * z]);
                }
            }
            assert!((lp.exp() - quad / d.normalizer()).abs() < 1e-10);
            let exact = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert!((lp.exp() - exact.exp()).abs() < 1e-6, "x {x} err {:e}", lp.exp() - exact.exp());
        }
    }

    #[test]
    fn round_trip() {
        let d = gaussian_density(2, 0.5);
        let p = d.empty_prefix();
        for u in [[0.0, 0.0], [1.3, -2.2], [-3.1, 0.4]] {
            let (x, ld) = d.transport_from(&p, &u).unwrap();
            let (u2, ld2) = d.untransport_from(&p, &x).unwrap();
            for k in 0..2 {
                assert!((u[k] - u2[k]).abs() < 1e-8);
            }
            assert!((ld + ld2).abs() < 1e-8);
        }
    }
}
