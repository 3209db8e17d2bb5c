//! Dense linear-algebra helpers shared across the crate.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SoedError};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

/// Eigendecomposition of a symmetric matrix.
///
/// Inputs that are not symmetric to within `1e-8 * ||A||` are symmetrized
/// as `(A + A^T) / 2` and a warning is logged.
pub fn eigensym(a: &DMatrix<f64>) -> Result<SymEigen> {
    if a.nrows() != a.ncols() {
        return Err(SoedError::dim("eigensym", a.nrows(), a.ncols()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(SymEigen {
            values: vec![],
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let norm = a.norm();
    let asym = (a - a.transpose()).norm();
    if asym > 1e-8 * norm.max(f64::MIN_POSITIVE) {
        warn!("eigensym: input asymmetric (|A-A^T| = {asym:.3e}), symmetrizing");
    }
    let sym = (a + a.transpose()) * 0.5;
    if !sym.iter().all(|v| v.is_finite()) {
        return Err(SoedError::Numerical("eigensym: non-finite entries".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// Cholesky factor of an SPD matrix. On failure a diagonal jitter of
/// `1e-10 * trace / n` is added and grown tenfold until the factorization
/// succeeds. Returns the lower factor and the jitter used.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    if let Some(ch) = nalgebra::Cholesky::new(a.clone()) {
        return Ok((ch.l(), 0.0));
    }
    let base = 1e-10 * a.trace().abs().max(f64::MIN_POSITIVE) / n.max(1) as f64;
    let mut jitter = base;
    for _ in 0..12 {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = nalgebra::Cholesky::new(shifted) {
            warn!("cholesky: added diagonal jitter {jitter:.3e}");
            return Ok((ch.l(), jitter));
        }
        jitter *= 10.0;
    }
    Err(SoedError::Numerical(
        "matrix is not positive definite even with jitter".into(),
    ))
}

/// `log det A` for SPD `A` via Cholesky.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    let ch = nalgebra::Cholesky::new(a.clone())
        .ok_or_else(|| SoedError::Numerical("logdet_spd: matrix not positive definite".into()))?;
    Ok(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `log det(I + B^T B)`, evaluated through whichever of `B B^T` or `B^T B`
/// is smaller.
pub fn logdet_identity_plus_gram(b: &DMatrix<f64>) -> Result<f64> {
    let (q, m) = b.shape();
    if q == 0 || m == 0 {
        return Ok(0.0);
    }
    let mut g = if q < m {
        b * b.transpose()
    } else {
        b.transpose() * b
    };
    for i in 0..g.nrows() {
        g[(i, i)] += 1.0;
    }
    logdet_spd(&g)
}

/// Eigenvalues of `B^T B` in descending order, padded with zeros to the
/// column count, and the leading `k` orthonormal eigenvectors. Uses the
/// smaller Gram matrix when `B` is wide.
pub fn gram_eigen(b: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (q, m) = b.shape();
    let k = k.min(m);
    if q >= m || q == 0 {
        let eig = eigensym(&(b.transpose() * b))?;
        let vecs = eig.vectors.columns(0, k).into_owned();
        return Ok((eig.values, vecs));
    }
    let eig = eigensym(&(b * b.transpose()))?;
    let mut values = eig.values.clone();
    values.resize(m, 0.0);
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    let mut vecs = DMatrix::zeros(m, k);
    let mut filled = 0;
    for j in 0..k.min(q) {
        if eig.values[j] <= 1e-14 * scale {
            break;
        }
        let col = b.transpose() * eig.vectors.column(j) / eig.values[j].sqrt();
        vecs.set_column(j, &col);
        filled += 1;
    }
    let mut vecs = vecs.columns(0, filled).into_owned();
    if filled < k {
        vecs = complete_orthonormal(&vecs, m, k);
    }
    Ok((values, orthonormalize_columns(&vecs)))
}

/// Extends a set of orthonormal columns to `k` columns using coordinate
/// directions orthogonalized against the existing ones.
fn complete_orthonormal(u: &DMatrix<f64>, m: usize, k: usize) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = u.column_iter().map(|c| c.into_owned()).collect();
    let mut e = 0;
    while cols.len() < k && e < m {
        let mut v = DVector::zeros(m);
        v[e] = 1.0;
        for c in &cols {
            let d = c.dot(&v);
            v.axpy(-d, c, 1.0);
        }
        let nv = v.norm();
        if nv > 1e-8 {
            cols.push(v / nv);
        }
        e += 1;
    }
    DMatrix::from_columns(&cols)
}

/// Re-orthonormalizes columns with modified Gram-Schmidt (two passes).
pub fn orthonormalize_columns(u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = u.clone();
    for _ in 0..2 {
        for j in 0..out.ncols() {
            for i in 0..j {
                let d = out.column(i).dot(&out.column(j));
                let ci = out.column(i).into_owned();
                out.column_mut(j).axpy(-d, &ci, 1.0);
            }
            let n = out.column(j).norm();
            if n > 0.0 {
                out.column_mut(j).scale_mut(1.0 / n);
            }
        }
    }
    out
}

/// Symmetric square-root factor `F` with `F F^T = P` for a PSD matrix;
/// negative eigenvalues from round-off are clipped to zero.
pub fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, p[(0, 0)].max(0.0).sqrt());
    }
    if let Some(ch) = nalgebra::Cholesky::new(p.clone()) {
        return ch.l();
    }
    let eig = nalgebra::SymmetricEigen::new((p + p.transpose()) * 0.5);
    let mut f = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(j).scale_mut(lam.max(0.0).sqrt());
    }
    f
}

/// Selects `r` rows of a tall `n x r` matrix spanning a (locally)
/// maximum-volume square submatrix.
pub fn maxvol(a: &DMatrix<f64>) -> Vec<usize> {
    let (n, r) = a.shape();
    assert!(r <= n, "maxvol needs a tall matrix");
    if r == 0 {
        return vec![];
    }
    // Initial guess from Gaussian elimination with row pivoting.
    let mut work = a.clone();
    let mut rows = Vec::with_capacity(r);
    let mut used = vec![false; n];
    for j in 0..r {
        let mut best = usize::MAX;
        let mut best_val = -1.0;
        for i in 0..n {
            if !used[i] && work[(i, j)].abs() > best_val {
                best_val = work[(i, j)].abs();
                best = i;
            }
        }
        used[best] = true;
        rows.push(best);
        let piv = work[(best, j)];
        if piv.abs() > 0.0 {
            for i in 0..n {
                if !used[i] {
                    let f = work[(i, j)] / piv;
                    for c in j..r {
                        work[(i, c)] -= f * work[(best, c)];
                    }
                }
            }
        }
    }
    let sub = DMatrix::from_fn(r, r, |i, j| a[(rows[i], j)]);
    let inv = match sub.clone().try_inverse() {
        Some(inv) => inv,
        None => return rows,
    };
    let mut b = a * inv;
    for _ in 0..(100 * r) {
        let (mut bi, mut bj, mut bv) = (0, 0, 0.0);
        for i in 0..n {
            for j in 0..r {
                let v = b[(i, j)].abs();
                if v > bv {
                    bv = v;
                    bi = i;
                    bj = j;
                }
            }
        }
        if bv <= 1.0 + 1e-3 {
            break;
        }
        // Swap row bi into position bj; rank-one update of B = A A[rows]^{-1}.
        let col = b.column(bj).into_owned();
        let mut row = b.row(bi).into_owned();
        row[bj] -= 1.0;
        let pivot = b[(bi, bj)];
        let mut colr = col;
        colr[rows[bj]] -= 1.0;
        b -= &colr * &row / pivot;
        rows[bj] = bi;
    }
    rows
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}
