//! Functional tensor trains and their construction by cross interpolation.

use std::collections::HashMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::basis::Basis1D;
use crate::error::{Result, SoedError};
use crate::linalg::maxvol;
use crate::rng::Stream;

/// One TT core: `values[j]` is the `left x right` matrix attached to basis function `j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Core {
    pub left: usize,
    pub right: usize,
    pub values: Vec<DMatrix<f64>>,
}

impl Core {
    /// `sum_j w_j values[j]`.
    pub fn contract(&self, weights: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.left, self.right);
        for (w, v) in weights.iter().zip(&self.values) {
            if *w != 0.0 {
                out.zip_apply(v, |o, x| *o += *w * x);
            }
        }
        out
    }
}

/// `f(x) = prod_k sum_j phi_j(x_k) G_k[j]` over a shared 1D basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalTt {
    pub basis: Basis1D,
    pub cores: Vec<Core>,
}

impl FunctionalTt {
    pub fn dim(&self) -> usize {
        self.cores.len()
    }

    /// `[r_0, r_1, ..., r_n]` with `r_0 = r_n = 1`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![1];
        r.extend(self.cores.iter().map(|c| c.right));
        r
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.basis.size()];
        let mut row = DMatrix::from_element(1, 1, 1.0);
        for (k, core) in self.cores.iter().enumerate() {
            self.basis.eval_into(x[k], &mut phi);
            row = row * core.contract(&phi);
        }
        row[(0, 0)]
    }

    /// Gram matrices of the trailing cores: `grams[k] = int R_k R_k^T` where
    /// `R_k` is the product of cores `k+1..n` (`grams[n-1] = [1]`).
    pub fn suffix_grams(&self) -> Vec<DMatrix<f64>> {
        let n = self.dim();
        let mut grams = vec![DMatrix::from_element(1, 1, 1.0); n];
        let r = self.basis.mass_factor();
        for k in (1..n).rev() {
            let core = &self.cores[k];
            let mut g = DMatrix::zeros(core.left, core.left);
            let mf = r.ncols();
            for i in 0..mf {
                let w: Vec<f64> = (0..mf).map(|j| r[(i, j)]).collect();
                let c = core.contract(&w);
                g += &c * &grams[k] * c.transpose();
            }
            grams[k - 1] = (&g + g.transpose()) * 0.5;
        }
        grams
    }

    /// `int f^2` over the domain.
    pub fn integral_squared(&self) -> f64 {
        let grams = self.suffix_grams();
        let core = &self.cores[0];
        let r = self.basis.mass_factor();
        let mut total = 0.0;
        for i in 0..r.nrows() {
            let w: Vec<f64> = (0..r.ncols()).map(|j| r[(i, j)]).collect();
            let c = core.contract(&w);
            total += (&c * &grams[0] * c.transpose())[(0, 0)];
        }
        total
    }
}

/// Settings of the cross-interpolation build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSettings {
    pub max_rank: usize,
    pub init_rank: usize,
    /// Random enrichment indices added per fiber.
    pub kick: usize,
    /// Half-sweeps (one direction each).
    pub sweeps: usize,
    /// Target held-out relative RMS of the square-root density.
    pub tolerance: f64,
    pub holdout: usize,
}

impl Default for CrossSettings {
    fn default() -> Self {
        Self {
            max_rank: 20,
            init_rank: 4,
            kick: 2,
            sweeps: 4,
            tolerance: 1e-3,
            holdout: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub ranks: Vec<usize>,
    pub evaluations: usize,
    pub heldout_rms: f64,
    pub converged: bool,
    pub rank_capped: bool,
    /// The log-density offset: the TT approximates `exp((log p - shift) / 2)`.
    pub shift: f64,
    /// Largest `f^2` seen among evaluations.
    pub max_f2: f64,
    pub nonfinite: usize,
}

type Index = Vec<u16>;

struct Evaluator<'a, F> {
    log_target: &'a F,
    basis: &'a Basis1D,
    cache: HashMap<Index, f64>,
    evaluations: usize,
    nonfinite: usize,
    point: Vec<f64>,
}

impl<F: Fn(&[f64]) -> f64> Evaluator<'_, F> {
    fn log_at(&mut self, idx: &[u16]) -> f64 {
        if let Some(v) = self.cache.get(idx) {
            return *v;
        }
        for (p, &i) in self.point.iter_mut().zip(idx) {
            *p = self.basis.nodes()[i as usize];
        }
        let v = self.raw(&self.point.clone());
        self.cache.insert(idx.to_vec(), v);
        v
    }

    fn raw(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.log_target)(x);
        if v.is_nan() || v == f64::INFINITY {
            self.nonfinite += 1;
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

fn truncation_rank(s: &DVector<f64>, rel_tol: f64, cap: usize) -> usize {
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 1;
    }
    let mut tail = total;
    let mut r = 0;
    for v in s.iter() {
        if tail.sqrt() <= rel_tol * total.sqrt() {
            break;
        }
        tail -= v * v;
        r += 1;
    }
    r.clamp(1, cap.min(s.len()))
}

/// `U (U[rows])^{-1}`, the interpolating factor of a maxvol cross.
fn interpolating_factor(u: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let r = u.ncols();
    let sub = DMatrix::from_fn(r, r, |i, j| u[(rows[i], j)]);
    let inv = sub.clone().try_inverse().unwrap_or_else(|| {
        sub.pseudo_inverse(1e-14)
            .unwrap_or_else(|_| DMatrix::identity(r, r))
    });
    u * inv
}

fn random_index(basis: &Basis1D, len: usize, rng: &mut Stream) -> Index {
    (0..len)
        .map(|_| {
            let z: f64 = rng.random();
            basis.nearest_node(basis.ref_inv_cdf(z)) as u16
        })
        .collect()
}

fn dedup(v: &mut Vec<Index>) {
    let mut seen = std::collections::HashSet::new();
    v.retain(|x| seen.insert(x.clone()));
}

/// Builds a functional TT approximating `exp((log_target(x) - shift) / 2)`
/// on `[-L, L]^dim` by alternating maxvol cross interpolation on the basis nodes.
pub fn tt_cross_build<F>(
    log_target: &F,
    dim: usize,
    basis: &Basis1D,
    settings: &CrossSettings,
    rng: &mut Stream,
) -> Result<(FunctionalTt, CrossReport)>
where
    F: Fn(&[f64]) -> f64,
{
    if dim == 0 {
        return Err(SoedError::InvalidInput("tensor train needs dimension >= 1".into()));
    }
    if settings.max_rank == 0 || settings.sweeps == 0 {
        return Err(SoedError::InvalidInput("rank cap and sweeps must be positive".into()));
    }
    let m = basis.size();
    let mut ev = Evaluator {
        log_target,
        basis,
        cache: HashMap::new(),
        evaluations: 0,
        nonfinite: 0,
        point: vec![0.0; dim],
    };

    let holdout: Vec<Vec<f64>> = (0..settings.holdout)
        .map(|_| (0..dim).map(|_| basis.ref_inv_cdf(rng.random())).collect())
        .collect();
    let holdout_log: Vec<f64> = holdout.iter().map(|x| ev.raw(x)).collect();
    let init: Vec<Index> = (0..settings.init_rank.max(1))
        .map(|_| random_index(basis, dim, rng))
        .collect();
    let init_log: Vec<f64> = init.iter().map(|i| ev.log_at(i)).collect();
    let shift = holdout_log
        .iter()
        .chain(&init_log)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(SoedError::TtBuild {
            reason: "target vanishes on all initial points".into(),
            evaluations: ev.evaluations,
            residual: f64::NAN,
        });
    }
    let to_f = |l: f64| (0.5 * (l - shift)).exp();

    // right[k]: index sets over coordinates k+1..dim, left[k]: over 0..k.
    let mut right: Vec<Vec<Index>> = (0..dim)
        .map(|k| {
            let mut s: Vec<Index> = init.iter().map(|i| i[k + 1..].to_vec()).collect();
            dedup(&mut s);
            s
        })
        .collect();
    let mut left: Vec<Vec<Index>> = vec![vec![vec![]]; dim];
    let mut cores: Vec<Core> = Vec::new();
    let mut report = CrossReport {
        ranks: vec![],
        evaluations: 0,
        heldout_rms: f64::INFINITY,
        converged: false,
        rank_capped: false,
        shift,
        max_f2: 0.0,
        nonfinite: 0,
    };
    let rel_tol = settings.tolerance / (dim as f64).sqrt();
    let full = |l: &Index, j: usize, r: &Index| -> Index {
        let mut idx = Vec::with_capacity(dim);
        idx.extend_from_slice(l);
        idx.push(j as u16);
        idx.extend_from_slice(r);
        idx
    };

    for sweep in 0..settings.sweeps {
        let forward = sweep % 2 == 0;
        let mut new_cores: Vec<Option<Core>> = vec![None; dim];
        let mut capped = false;
        if forward {
            for k in 0..dim {
                let lset = left[k].clone();
                let mut rset = right[k].clone();
                if k + 1 < dim {
                    for _ in 0..settings.kick {
                        rset.push(random_index(basis, dim - k - 1, rng));
                    }
                    dedup(&mut rset);
                }
                let rows = lset.len() * m;
                let mut a = DMatrix::zeros(rows, rset.len());
                for (al, l) in lset.iter().enumerate() {
                    for j in 0..m {
                        for (be, r) in rset.iter().enumerate() {
                            a[(al * m + j, be)] = to_f(ev.log_at(&full(l, j, r)));
                        }
                    }
                }
                if k + 1 == dim {
                    let values = (0..m)
                        .map(|j| DMatrix::from_fn(lset.len(), 1, |al, _| a[(al * m + j, 0)]))
                        .collect();
                    new_cores[k] = Some(Core {
                        left: lset.len(),
                        right: 1,
                        values,
                    });
                    break;
                }
                let svd = a.svd(true, false);
                let r = truncation_rank(&svd.singular_values, rel_tol, settings.max_rank);
                capped |= r == settings.max_rank && r < svd.singular_values.len();
                let u = svd.u.expect("svd computed u").columns(0, r).into_owned();
                let piv = maxvol(&u);
                let factor = interpolating_factor(&u, &piv);
                let values = (0..m)
                    .map(|j| DMatrix::from_fn(lset.len(), r, |al, c| factor[(al * m + j, c)]))
                    .collect();
                new_cores[k] = Some(Core {
                    left: lset.len(),
                    right: r,
                    values,
                });
                left[k + 1] = piv
                    .iter()
                    .map(|&row| {
                        let mut idx = lset[row / m].clone();
                        idx.push((row % m) as u16);
                        idx
                    })
                    .collect();
            }
        } else {
            for k in (0..dim).rev() {
                let rset = right[k].clone();
                let mut lset = left[k].clone();
                if k > 0 {
                    for _ in 0..settings.kick {
                        lset.push(random_index(basis, k, rng));
                    }
                    dedup(&mut lset);
                }
                let cols = m * rset.len();
                // Transposed fiber: rows (j, beta), columns alpha.
                let mut b = DMatrix::zeros(cols, lset.len());
                for (al, l) in lset.iter().enumerate() {
                    for j in 0..m {
                        for (be, r) in rset.iter().enumerate() {
                            b[(j * rset.len() + be, al)] = to_f(ev.log_at(&full(l, j, r)));
                        }
                    }
                }
                if k == 0 {
                    let values = (0..m)
                        .map(|j| DMatrix::from_fn(1, rset.len(), |_, be| b[(j * rset.len() + be, 0)]))
                        .collect();
                    new_cores[0] = Some(Core {
                        left: 1,
                        right: rset.len(),
                        values,
                    });
                    break;
                }
                let svd = b.svd(true, false);
                let r = truncation_rank(&svd.singular_values, rel_tol, settings.max_rank);
                capped |= r == settings.max_rank && r < svd.singular_values.len();
                let u = svd.u.expect("svd computed u").columns(0, r).into_owned();
                let piv = maxvol(&u);
                let factor = interpolating_factor(&u, &piv);
                let nr = rset.len();
                let values = (0..m)
                    .map(|j| DMatrix::from_fn(r, nr, |c, be| factor[(j * nr + be, c)]))
                    .collect();
                new_cores[k] = Some(Core {
                    left: r,
                    right: nr,
                    values,
                });
                right[k - 1] = piv
                    .iter()
                    .map(|&row| {
                        let mut idx = vec![(row / nr) as u16];
                        idx.extend_from_slice(&rset[row % nr]);
                        idx
                    })
                    .collect();
            }
        }
        if ev.nonfinite * 10 > ev.evaluations {
            return Err(SoedError::TtBuild {
                reason: format!("{} of {} target evaluations were not finite", ev.nonfinite, ev.evaluations),
                evaluations: ev.evaluations,
                residual: report.heldout_rms,
            });
        }
        cores = new_cores.into_iter().map(|c| c.expect("all cores built")).collect();
        let tt = FunctionalTt {
            basis: basis.clone(),
            cores: cores.clone(),
        };
        let (mut num, mut den) = (0.0, 0.0);
        for (x, l) in holdout.iter().zip(&holdout_log) {
            let f = to_f(*l);
            let d = tt.eval(x) - f;
            num += d * d;
            den += f * f;
        }
        report.heldout_rms = if den > 0.0 { (num / den).sqrt() } else { f64::INFINITY };
        report.rank_capped = capped;
        debug!(
            "tt-cross sweep {sweep}: ranks {:?}, evaluations {}, held-out rms {:.3e}",
            tt.ranks(),
            ev.evaluations,
            report.heldout_rms
        );
        if sweep >= 1 && report.heldout_rms <= settings.tolerance {
            report.converged = true;
            break;
        }
    }
    let tt = FunctionalTt {
        basis: basis.clone(),
        cores,
    };
    report.ranks = tt.ranks();
    report.evaluations = ev.evaluations;
    report.nonfinite = ev.nonfinite;
    report.max_f2 = ev
        .cache
        .values()
        .chain(&holdout_log)
        .map(|l| to_f(*l).powi(2))
        .fold(0.0, f64::max);
    if !report.converged {
        warn!(
            "tt-cross stopped at held-out rms {:.3e} (ranks {:?})",
            report.heldout_rms, report.ranks
        );
    }
    Ok((tt, report))
}
