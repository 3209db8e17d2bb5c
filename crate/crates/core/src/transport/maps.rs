//! Transport maps between the standard Gaussian reference and a target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::density::{Prefix, SquaredTtDensity};
use crate::error::{Result, SoedError};
use crate::models::std_normal_logpdf;

/// Finite-difference step used for map Jacobians: `FD_STEP * (1 + |v_i|)`.
pub const FD_STEP: f64 = 1e-4;

/// Invertible map `T` pushing the reference forward to a target.
pub trait TransportMap: Send + Sync {
    fn dim(&self) -> usize;

    /// Reference -> target, with `log |det grad T(u)|`.
    fn forward_with_log_det(&self, u: &DVector<f64>) -> Result<(DVector<f64>, f64)>;

    /// Target -> reference.
    fn inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn forward(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_with_log_det(u)?.0)
    }

    fn log_det_jacobian(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(self.forward_with_log_det(u)?.1)
    }

    /// `grad T(u)`, by central differences unless overridden.
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        crate::models::fd_jacobian(|v| self.forward(v), u, FD_STEP)
    }

    /// `R grad T(u)` for a row block `R`.
    fn pullback_rows(&self, u: &DVector<f64>, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(rows * self.jacobian(u)?)
    }

    fn num_layers(&self) -> usize {
        1
    }

    /// `log (T_# rho)(x)` for the standard Gaussian reference `rho`.
    fn log_pushforward_density(&self, x: &DVector<f64>) -> Result<f64> {
        let u = self.inverse(x)?;
        let (_, ld) = self.forward_with_log_det(&u)?;
        Ok(std_normal_logpdf(&u) - ld)
    }

    /// `log (T^# pi)(u) = log pi(T(u)) + log |det grad T(u)|`.
    fn log_pullback_density(
        &self,
        u: &DVector<f64>,
        log_target: &dyn Fn(&DVector<f64>) -> Result<f64>,
    ) -> Result<f64> {
        let (x, ld) = self.forward_with_log_det(u)?;
        Ok(log_target(&x)? + ld)
    }
}

/// Knothe-Rosenblatt map of a squared-TT density: `T = F^{-1} o R`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrMap {
    pub density: SquaredTtDensity,
}

impl KrMap {
    pub fn new(density: SquaredTtDensity) -> Self {
        Self { density }
    }
}

impl TransportMap for KrMap {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn forward_with_log_det(&self, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        check_dim("kr map input", self.dim(), u.len())?;
        let (x, ld) = self
            .density
            .transport_from(&self.density.empty_prefix(), u.as_slice())?;
        Ok((DVector::from_vec(x), ld))
    }

    fn inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("kr map input", self.dim(), x.len())?;
        let (u, _) = self
            .density
            .untransport_from(&self.density.empty_prefix(), x.as_slice())?;
        Ok(DVector::from_vec(u))
    }

    fn log_pushforward_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.density.log_density(x.as_slice())
    }
}

/// Parameter block of a stack of joint (data, parameter) KR layers at fixed data.
///
/// `prefixes[l]` is the data block of the output of layer `l`; layer 0 is
/// the outermost. Reconstructed prefix states are cached on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "FixedDataParts", into = "FixedDataParts")]
pub struct FixedDataMap {
    layers: Vec<SquaredTtDensity>,
    prefixes: Vec<Vec<f64>>,
    states: Vec<Prefix>,
}

#[derive(Serialize, Deserialize)]
struct FixedDataParts {
    layers: Vec<SquaredTtDensity>,
    prefixes: Vec<Vec<f64>>,
}

impl From<FixedDataParts> for FixedDataMap {
    fn from(p: FixedDataParts) -> Self {
        FixedDataMap::from_prefixes(p.layers, p.prefixes).expect("serialized conditional map is valid")
    }
}

impl From<FixedDataMap> for FixedDataParts {
    fn from(m: FixedDataMap) -> Self {
        FixedDataParts {
            layers: m.layers,
            prefixes: m.prefixes,
        }
    }
}

impl FixedDataMap {
    /// Conditions the joint stack on data `y` (in the joint map's coordinates).
    pub fn new(layers: Vec<SquaredTtDensity>, y: &[f64]) -> Result<Self> {
        let mut prefixes = Vec::with_capacity(layers.len());
        let mut cur = y.to_vec();
        for layer in &layers {
            prefixes.push(cur.clone());
            // The data block of this layer's input is the next layer's output.
            cur = layer.untransport_prefix(&cur)?;
        }
        Self::from_prefixes(layers, prefixes)
    }

    fn from_prefixes(layers: Vec<SquaredTtDensity>, prefixes: Vec<Vec<f64>>) -> Result<Self> {
        if layers.is_empty() || layers.len() != prefixes.len() {
            return Err(SoedError::InvalidInput("conditional map needs one prefix per layer".into()));
        }
        let states = layers
            .iter()
            .zip(&prefixes)
            .map(|(l, p)| l.prefix(p).map(|s| s.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            prefixes,
            states,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.prefixes[0].len()
    }

    pub fn layers(&self) -> &[SquaredTtDensity] {
        &self.layers
    }
}

impl TransportMap for FixedDataMap {
    fn dim(&self) -> usize {
        self.layers[0].dim() - self.data_dim()
    }

    fn forward_with_log_det(&self, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        check_dim("conditional map input", self.dim(), u.len())?;
        let mut cur = u.as_slice().to_vec();
        let mut total = 0.0;
        for (layer, state) in self.layers.iter().zip(&self.states).rev() {
            let (x, ld) = layer.transport_from(state, &cur)?;
            cur = x;
            total += ld;
        }
        Ok((DVector::from_vec(cur), total))
    }

    fn inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("conditional map input", self.dim(), x.len())?;
        let mut cur = x.as_slice().to_vec();
        for (layer, state) in self.layers.iter().zip(&self.states) {
            cur = layer.untransport_from(state, &cur)?.0;
        }
        Ok(DVector::from_vec(cur))
    }

    fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Serializable transport map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Map {
    Identity(usize),
    /// `T(u) = shift + matrix u`.
    Linear {
        shift: DVector<f64>,
        matrix: DMatrix<f64>,
    },
    Kr(KrMap),
    /// `T(v) = U T~(U^T v) + (I - U U^T) v`.
    Embedded { basis: DMatrix<f64>, inner: Box<Map> },
    /// `layers[0] o layers[1] o ... o layers[L-1]`; the last layer acts first.
    Composed(Vec<Map>),
    FixedData(FixedDataMap),
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(SoedError::dim(context, expected, got))
    } else {
        Ok(())
    }
}

impl Map {
    pub fn linear(shift: DVector<f64>, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || shift.len() != matrix.nrows() {
            return Err(SoedError::dim("linear map", matrix.nrows(), shift.len()));
        }
        Ok(Map::Linear { shift, matrix })
    }

    /// Embeds a reduced map through an orthonormal basis.
    pub fn embedded(basis: DMatrix<f64>, inner: Map) -> Result<Self> {
        if basis.ncols() != inner.dim() {
            return Err(SoedError::dim("embedded map basis", inner.dim(), basis.ncols()));
        }
        let r = basis.ncols();
        let err = (basis.transpose() * &basis - DMatrix::identity(r, r)).norm();
        if err > 1e-8 {
            return Err(SoedError::InvalidInput(format!(
                "embedding basis is not orthonormal (|U^T U - I| = {err:.3e})"
            )));
        }
        Ok(Map::Embedded {
            basis,
            inner: Box::new(inner),
        })
    }

    /// `outer o inner`, flattening nested compositions and dropping identities.
    pub fn compose(outer: Map, inner: Map) -> Result<Self> {
        check_dim("composed map", outer.dim(), inner.dim())?;
        let dim = outer.dim();
        let mut layers = Vec::new();
        for m in [outer, inner] {
            match m {
                Map::Composed(ls) => layers.extend(ls),
                Map::Identity(_) => {}
                other => layers.push(other),
            }
        }
        Ok(match layers.len() {
            0 => Map::Identity(dim),
            1 => layers.pop().expect("one layer"),
            _ => Map::Composed(layers),
        })
    }

    /// Top-level layers in application order reversed (outermost first).
    pub fn layers(&self) -> Vec<&Map> {
        match self {
            Map::Composed(ls) => ls.iter().collect(),
            Map::Identity(_) => vec![],
            other => vec![other],
        }
    }
}

impl TransportMap for Map {
    fn dim(&self) -> usize {
        match self {
            Map::Identity(n) => *n,
            Map::Linear { shift, .. } => shift.len(),
            Map::Kr(k) => k.dim(),
            Map::Embedded { basis, .. } => basis.nrows(),
            Map::Composed(ls) => ls.first().map_or(0, |l| l.dim()),
            Map::FixedData(f) => f.dim(),
        }
    }

    fn forward_with_log_det(&self, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        check_dim("map input", self.dim(), u.len())?;
        match self {
            Map::Identity(_) => Ok((u.clone(), 0.0)),
            Map::Linear { shift, matrix } => {
                let ld = matrix.clone().lu().determinant().abs().ln();
                Ok((shift + matrix * u, ld))
            }
            Map::Kr(k) => k.forward_with_log_det(u),
            Map::Embedded { basis, inner } => {
                let coef = basis.tr_mul(u);
                let (t, ld) = inner.forward_with_log_det(&coef)?;
                Ok((u + basis * (t - coef), ld))
            }
            Map::Composed(ls) => {
                let mut cur = u.clone();
                let mut total = 0.0;
                for l in ls.iter().rev() {
                    let (x, ld) = l.forward_with_log_det(&cur)?;
                    cur = x;
                    total += ld;
                }
                Ok((cur, total))
            }
            Map::FixedData(f) => f.forward_with_log_det(u),
        }
    }

    fn inverse(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("map input", self.dim(), x.len())?;
        match self {
            Map::Identity(_) => Ok(x.clone()),
            Map::Linear { shift, matrix } => matrix
                .clone()
                .lu()
                .solve(&(x - shift))
                .ok_or_else(|| SoedError::Numerical("singular linear map".into())),
            Map::Kr(k) => k.inverse(x),
            Map::Embedded { basis, inner } => {
                let coef = basis.tr_mul(x);
                let t = inner.inverse(&coef)?;
                Ok(x + basis * (t - coef))
            }
            Map::Composed(ls) => {
                let mut cur = x.clone();
                for l in ls {
                    cur = l.inverse(&cur)?;
                }
                Ok(cur)
            }
            Map::FixedData(f) => f.inverse(x),
        }
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        self.pullback_rows(u, &DMatrix::identity(n, n))
    }

    fn pullback_rows(&self, u: &DVector<f64>, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("pullback rows", self.dim(), rows.ncols())?;
        match self {
            Map::Identity(_) => Ok(rows.clone()),
            Map::Linear { matrix, .. } => Ok(rows * matrix),
            Map::Kr(k) => Ok(rows * k.jacobian(u)?),
            Map::FixedData(f) => Ok(rows * f.jacobian(u)?),
            Map::Embedded { basis, inner } => {
                // R grad T = R + (R U)(grad T~ - I) U^T.
                let coef = basis.tr_mul(u);
                let ru = rows * basis;
                let reduced = inner.pullback_rows(&coef, &ru)? - &ru;
                Ok(rows + reduced * basis.transpose())
            }
            Map::Composed(ls) => {
                // Inputs of each layer, innermost first.
                let mut inputs = Vec::with_capacity(ls.len());
                let mut cur = u.clone();
                for l in ls.iter().rev() {
                    inputs.push(cur.clone());
                    cur = l.forward(&cur)?;
                }
                let mut acc = rows.clone();
                for (l, input) in ls.iter().zip(inputs.iter().rev()) {
                    acc = l.pullback_rows(input, &acc)?;
                }
                Ok(acc)
            }
        }
    }

    fn num_layers(&self) -> usize {
        match self {
            Map::Identity(_) => 0,
            Map::Composed(ls) => ls.iter().map(|l| l.num_layers()).sum(),
            Map::Embedded { inner, .. } => inner.num_layers(),
            Map::FixedData(f) => f.num_layers(),
            _ => 1,
        }
    }

    fn log_pushforward_density(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            Map::Kr(k) => k.log_pushforward_density(x),
            _ => {
                let u = self.inverse(x)?;
                let (_, ld) = self.forward_with_log_det(&u)?;
                Ok(std_normal_logpdf(&u) - ld)
            }
        }
    }
}
