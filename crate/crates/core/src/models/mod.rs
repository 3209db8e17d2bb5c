//! Priors, noise, candidate sets and forward models.

mod elliptic;
mod linear;
mod toy;

pub use elliptic::{EllipticDiffusivity, EllipticSettings};
pub use linear::LinearModel;
pub use toy::NonlinearToy;

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoedError};
use crate::linalg::cholesky_with_jitter;
use crate::rng::{standard_normal_vec, Stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of the standard Gaussian in `n` dimensions.
pub fn std_normal_logpdf(v: &DVector<f64>) -> f64 {
    -0.5 * v.norm_squared() - 0.5 * v.len() as f64 * LN_2PI
}

/// Gaussian prior `N(m0, C0)` with a lower-triangular factor `L L^T = C0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sqrt_factor: DMatrix<f64>,
    /// Diagonal jitter that was needed to factor the covariance.
    pub jitter: f64,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(SoedError::dim("prior covariance", n, covariance.nrows()));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let (sqrt_factor, jitter) = cholesky_with_jitter(&covariance)?;
        Ok(Self {
            mean,
            covariance,
            sqrt_factor,
            jitter,
        })
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            covariance: DMatrix::identity(n, n),
            sqrt_factor: DMatrix::identity(n, n),
            jitter: 0.0,
        }
    }

    /// Squared-exponential kernel `exp(-|x - z|^2 / (2 l^2))` on the given points.
    pub fn squared_exponential(points: &[[f64; 2]], length: f64) -> Result<Self> {
        if length <= 0.0 {
            return Err(SoedError::InvalidInput("kernel length must be positive".into()));
        }
        let n = points.len();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            (-(dx * dx + dy * dy) / (2.0 * length * length)).exp()
        });
        Self::new(DVector::zeros(n), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `m = m0 + L v`.
    pub fn transform(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(SoedError::dim("prior_transform", self.dim(), v.len()));
        }
        Ok(&self.mean + &self.sqrt_factor * v)
    }

    /// `v = L^{-1} (m - m0)`.
    pub fn inverse_transform(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        if m.len() != self.dim() {
            return Err(SoedError::dim("prior_transform inverse", self.dim(), m.len()));
        }
        self.sqrt_factor
            .solve_lower_triangular(&(m - &self.mean))
            .ok_or_else(|| SoedError::Numerical("singular prior factor".into()))
    }

    /// Log density of the whitened reference at `v`.
    pub fn reference_logpdf(&self, v: &DVector<f64>) -> f64 {
        std_normal_logpdf(v)
    }

    /// Log density of the prior at `m`.
    pub fn logpdf(&self, m: &DVector<f64>) -> Result<f64> {
        let v = self.inverse_transform(m)?;
        let logdet: f64 = self.sqrt_factor.diagonal().iter().map(|d| d.ln()).sum();
        Ok(std_normal_logpdf(&v) - logdet)
    }

    pub fn sample(&self, rng: &mut Stream) -> DVector<f64> {
        let v = DVector::from_vec(standard_normal_vec(rng, self.dim()));
        &self.mean + &self.sqrt_factor * v
    }
}

/// Additive Gaussian observation noise with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// The same standard deviation for every observation.
    Isotropic { sigma: f64 },
    /// One vector of standard deviations (length `Nd`) per design.
    PerDesign { sigmas: Vec<Vec<f64>> },
}

impl NoiseModel {
    pub fn isotropic(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(SoedError::InvalidInput(format!(
                "noise standard deviation must be positive, got {sigma}"
            )));
        }
        Ok(NoiseModel::Isotropic { sigma })
    }

    pub fn per_design(sigmas: Vec<Vec<f64>>) -> Result<Self> {
        if sigmas.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(SoedError::InvalidInput(
                "all noise standard deviations must be positive".into(),
            ));
        }
        Ok(NoiseModel::PerDesign { sigmas })
    }

    /// Standard deviation of observation `i` of design `e`.
    pub fn sigma(&self, e: usize, i: usize) -> f64 {
        match self {
            NoiseModel::Isotropic { sigma } => *sigma,
            NoiseModel::PerDesign { sigmas } => sigmas[e][i],
        }
    }

    pub fn sigmas(&self, e: usize, nd: usize) -> DVector<f64> {
        DVector::from_fn(nd, |i, _| self.sigma(e, i))
    }

    pub fn validate(&self, candidates: &CandidateSet) -> Result<()> {
        if let NoiseModel::PerDesign { sigmas } = self {
            if sigmas.len() != candidates.count {
                return Err(SoedError::dim("noise designs", candidates.count, sigmas.len()));
            }
            if let Some(s) = sigmas.iter().find(|s| s.len() != candidates.obs_dim) {
                return Err(SoedError::dim("noise observations", candidates.obs_dim, s.len()));
            }
        }
        Ok(())
    }
}

/// The finite set of candidate experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub count: usize,
    pub obs_dim: usize,
    pub labels: Vec<String>,
}

impl CandidateSet {
    pub fn new(count: usize, obs_dim: usize, labels: Vec<String>) -> Result<Self> {
        if count == 0 || obs_dim == 0 {
            return Err(SoedError::InvalidInput(
                "candidate set needs at least one design and one observation".into(),
            ));
        }
        if labels.len() != count {
            return Err(SoedError::dim("candidate labels", count, labels.len()));
        }
        Ok(Self {
            count,
            obs_dim,
            labels,
        })
    }

    pub fn indexed(count: usize, obs_dim: usize) -> Result<Self> {
        Self::new(count, obs_dim, (0..count).map(|e| format!("e{e}")).collect())
    }

    /// Rows of the stacked observable belonging to design `e` (0-based).
    pub fn select_rows(&self, e: usize) -> Result<Range<usize>> {
        if e >= self.count {
            return Err(SoedError::InvalidInput(format!(
                "design index {e} out of range (count {})",
                self.count
            )));
        }
        Ok(e * self.obs_dim..(e + 1) * self.obs_dim)
    }

    /// The row-selection matrix `W(e)` (`Nd x Ne*Nd`).
    pub fn selection_matrix(&self, e: usize) -> Result<DMatrix<f64>> {
        let rows = self.select_rows(e)?;
        let mut w = DMatrix::zeros(self.obs_dim, self.count * self.obs_dim);
        for (i, r) in rows.enumerate() {
            w[(i, r)] = 1.0;
        }
        Ok(w)
    }

    pub fn total_obs(&self) -> usize {
        self.count * self.obs_dim
    }
}

/// A forward model producing the stacked observables of every candidate design.
pub trait ForwardModel: Send + Sync {
    fn param_dim(&self) -> usize;

    fn candidates(&self) -> &CandidateSet;

    /// Stacked observables, length `Ne * Nd`.
    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobian of `evaluate`, `(Ne * Nd) x Nm`.
    fn jacobian(&self, m: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn evaluate_with_jacobian(&self, m: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.evaluate(m)?, self.jacobian(m)?))
    }

    /// Observables of a single design.
    fn evaluate_design(&self, e: usize, m: &DVector<f64>) -> Result<DVector<f64>> {
        let rows = self.candidates().select_rows(e)?;
        Ok(self.evaluate(m)?.rows(rows.start, rows.len()).into_owned())
    }
}

impl<T: ForwardModel + ?Sized> ForwardModel for Arc<T> {
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn candidates(&self) -> &CandidateSet {
        (**self).candidates()
    }
    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).evaluate(m)
    }
    fn jacobian(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(m)
    }
    fn evaluate_with_jacobian(&self, m: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        (**self).evaluate_with_jacobian(m)
    }
    fn evaluate_design(&self, e: usize, m: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).evaluate_design(e, m)
    }
}

pub(crate) fn check_finite(context: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SoedError::ModelEvaluation(format!("{context}: non-finite output")))
    }
}

/// Gaussian log-likelihood of data `y` given the design block `g_e` of the observables.
pub fn log_likelihood_from_output(
    noise: &NoiseModel,
    e: usize,
    g_e: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if g_e.len() != y.len() {
        return Err(SoedError::dim("data vector", g_e.len(), y.len()));
    }
    check_finite("log-likelihood", g_e)?;
    let mut ll = -0.5 * y.len() as f64 * LN_2PI;
    for i in 0..y.len() {
        let s = noise.sigma(e, i);
        let r = (g_e[i] - y[i]) / s;
        ll -= 0.5 * r * r + s.ln();
    }
    Ok(ll)
}

/// `log L(y | m, e)`.
pub fn log_likelihood(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    m: &DVector<f64>,
    e: usize,
    y: &DVector<f64>,
) -> Result<f64> {
    let g = model.evaluate_design(e, m)?;
    log_likelihood_from_output(noise, e, &g, y)
}

/// `log L(y | m, e)` and its gradient `-J_e^T Gamma^{-1} (G_e(m) - y)`.
pub fn log_likelihood_with_gradient(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    m: &DVector<f64>,
    e: usize,
    y: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let rows = model.candidates().select_rows(e)?;
    let (g, j) = model.evaluate_with_jacobian(m)?;
    let g_e = g.rows(rows.start, rows.len()).into_owned();
    let ll = log_likelihood_from_output(noise, e, &g_e, y)?;
    let scaled = DVector::from_fn(y.len(), |i, _| {
        let s = noise.sigma(e, i);
        (g_e[i] - y[i]) / (s * s)
    });
    let grad = -(j.rows(rows.start, rows.len()).transpose() * scaled);
    Ok((ll, grad))
}

/// `y = G(e, m_true) + eta`, with `eta` drawn from the noise model.
pub fn simulate_data(
    model: &dyn ForwardModel,
    noise: &NoiseModel,
    m_true: &DVector<f64>,
    e: usize,
    rng: &mut Stream,
) -> Result<DVector<f64>> {
    let g = model.evaluate_design(e, m_true)?;
    check_finite("simulate_data", &g)?;
    let eta = standard_normal_vec(rng, g.len());
    Ok(DVector::from_fn(g.len(), |i, _| {
        g[i] + noise.sigma(e, i) * eta[i]
    }))
}

/// Ordered record of chosen designs and observed data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub entries: Vec<(usize, DVector<f64>)>,
}

impl History {
    pub fn push(&mut self, e: usize, y: DVector<f64>) {
        self.entries.push((e, y));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Next stage index (1-based).
    pub fn stage(&self) -> usize {
        self.entries.len() + 1
    }

    /// Sum of log-likelihoods of all recorded experiments, from one model evaluation.
    pub fn log_likelihood(
        &self,
        model: &dyn ForwardModel,
        noise: &NoiseModel,
        m: &DVector<f64>,
    ) -> Result<f64> {
        if self.entries.is_empty() {
            return Ok(0.0);
        }
        let g = model.evaluate(m)?;
        self.log_likelihood_from_output(model.candidates(), noise, &g)
    }

    pub fn log_likelihood_from_output(
        &self,
        candidates: &CandidateSet,
        noise: &NoiseModel,
        g: &DVector<f64>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (e, y) in &self.entries {
            let rows = candidates.select_rows(*e)?;
            let g_e = g.rows(rows.start, rows.len()).into_owned();
            total += log_likelihood_from_output(noise, *e, &g_e, y)?;
        }
        Ok(total)
    }

    /// Log-likelihood and gradient of all recorded experiments.
    pub fn log_likelihood_with_gradient(
        &self,
        model: &dyn ForwardModel,
        noise: &NoiseModel,
        m: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        let mut grad = DVector::zeros(m.len());
        if self.entries.is_empty() {
            return Ok((0.0, grad));
        }
        let (g, j) = model.evaluate_with_jacobian(m)?;
        let cands = model.candidates();
        let mut total = 0.0;
        for (e, y) in &self.entries {
            let rows = cands.select_rows(*e)?;
            let g_e = g.rows(rows.start, rows.len()).into_owned();
            total += log_likelihood_from_output(noise, *e, &g_e, y)?;
            let scaled = DVector::from_fn(y.len(), |i, _| {
                let s = noise.sigma(*e, i);
                (g_e[i] - y[i]) / (s * s)
            });
            grad -= j.rows(rows.start, rows.len()).transpose() * scaled;
        }
        Ok((total, grad))
    }
}

/// A model expressed in whitened coordinates: `v -> G(m0 + L v)`.
pub struct WhitenedModel<M> {
    inner: M,
    prior: GaussianPrior,
}

impl<M: ForwardModel> WhitenedModel<M> {
    pub fn new(inner: M, prior: GaussianPrior) -> Result<Self> {
        if inner.param_dim() != prior.dim() {
            return Err(SoedError::dim("whitened model prior", inner.param_dim(), prior.dim()));
        }
        Ok(Self { inner, prior })
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: ForwardModel> ForwardModel for WhitenedModel<M> {
    fn param_dim(&self) -> usize {
        self.prior.dim()
    }
    fn candidates(&self) -> &CandidateSet {
        self.inner.candidates()
    }
    fn evaluate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.evaluate(&self.prior.transform(v)?)
    }
    fn jacobian(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inner.jacobian(&self.prior.transform(v)?)? * &self.prior.sqrt_factor)
    }
    fn evaluate_with_jacobian(&self, v: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (g, j) = self.inner.evaluate_with_jacobian(&self.prior.transform(v)?)?;
        Ok((g, j * &self.prior.sqrt_factor))
    }
    fn evaluate_design(&self, e: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.evaluate_design(e, &self.prior.transform(v)?)
    }
}

/// Wrapper counting forward-model calls. A call to any evaluation method
/// (with or without Jacobian) counts as one solve.
pub struct CountingModel<M> {
    inner: M,
    solves: AtomicUsize,
}

impl<M: ForwardModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            solves: AtomicUsize::new(0),
        }
    }

    pub fn solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn tick(&self) {
        self.solves.fetch_add(1, Ordering::Relaxed);
    }
}

impl<M: ForwardModel> ForwardModel for CountingModel<M> {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn candidates(&self) -> &CandidateSet {
        self.inner.candidates()
    }
    fn evaluate(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.tick();
        self.inner.evaluate(m)
    }
    fn jacobian(&self, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.tick();
        self.inner.jacobian(m)
    }
    fn evaluate_with_jacobian(&self, m: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.tick();
        self.inner.evaluate_with_jacobian(m)
    }
    fn evaluate_design(&self, e: usize, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.tick();
        self.inner.evaluate_design(e, m)
    }
}

/// Central finite-difference Jacobian of a vector function.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let h = step * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        cols.push((f(&xp)? - f(&xm)?) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn scalar_identity() -> LinearModel {
        LinearModel::new(DMatrix::identity(1, 1), 1).unwrap()
    }

    #[test]
    fn prior_transform_examples() {
        let p = GaussianPrior::standard(2);
        let m = p.transform(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 2.0]);
        let p = GaussianPrior::new(DVector::from_element(1, 3.0), DMatrix::from_element(1, 1, 4.0))
            .unwrap();
        assert_eq!(p.transform(&DVector::from_element(1, 1.0)).unwrap()[0], 5.0);
        assert!(p.transform(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn log_likelihood_examples() {
        let model = scalar_identity();
        let noise = NoiseModel::isotropic(1.0).unwrap();
        let m = DVector::zeros(1);
        let ll0 = log_likelihood(&model, &noise, &m, 0, &DVector::zeros(1)).unwrap();
        assert!((ll0 + 0.5 * LN_2PI).abs() < 1e-15);
        let ll1 = log_likelihood(&model, &noise, &m, 0, &DVector::from_element(1, 1.0)).unwrap();
        assert!((ll1 + 0.5 + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn selection_rows() {
        let c = CandidateSet::indexed(3, 2).unwrap();
        assert_eq!(c.select_rows(1).unwrap(), 2..4);
        assert!(c.select_rows(3).is_err());
        let c1 = CandidateSet::indexed(1, 3).unwrap();
        assert_eq!(c1.selection_matrix(0).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn simulate_zero_noise_and_determinism() {
        let model = LinearModel::new(DMatrix::from_row_slice(2, 1, &[2.0, -1.0]), 1).unwrap();
        let m = DVector::from_element(1, 1.5);
        let tiny = NoiseModel::isotropic(1e-300).unwrap();
        let y = simulate_data(&model, &tiny, &m, 1, &mut substream(1, &[])).unwrap();
        assert!((y[0] + 1.5).abs() < 1e-12);
        let noise = NoiseModel::isotropic(0.3).unwrap();
        let a = simulate_data(&model, &noise, &m, 0, &mut substream(9, &[1])).unwrap();
        let b = simulate_data(&model, &noise, &m, 0, &mut substream(9, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counting_model_counts() {
        let model = CountingModel::new(scalar_identity());
        let m = DVector::zeros(1);
        model.evaluate(&m).unwrap();
        model.jacobian(&m).unwrap();
        model.evaluate_with_jacobian(&m).unwrap();
        assert_eq!(model.solves(), 3);
    }
}
