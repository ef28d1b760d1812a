//! Dense symmetric linear algebra.
//!
//! Every covariance in the crate is stored as a [`SymMatrix`] and factored
//! through [`cholesky`], which applies a fixed jitter escalation when a
//! kernel matrix is numerically singular. Densities are always evaluated
//! through triangular solves; nothing here forms an explicit inverse except
//! [`CholFactor::inverse`], which the gradient code needs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative starting jitter, as a fraction of the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Relative jitter cap, as a fraction of the mean diagonal.
pub const JITTER_CAP: f64 = 1e-4;

/// Square matrix that is symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, replacing it by `(m + mᵀ) / 2` so the result is exactly
    /// symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut m = m;
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(SymMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn mean_diag(&self) -> f64 {
        self.0.diagonal().mean()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Adds `v` to every diagonal entry.
    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.dim() {
            self.0[(i, i)] += v;
        }
    }

    /// Principal submatrix on `idx` (rows and columns in the given order).
    pub fn select(&self, idx: &[usize]) -> SymMatrix {
        let n = idx.len();
        SymMatrix(DMatrix::from_fn(n, n, |i, j| self.0[(idx[i], idx[j])]))
    }
}

/// Cholesky factor of a (possibly jittered) [`SymMatrix`].
#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Total diagonal jitter that was added before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    /// `L⁻¹ B`.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factors `m + jitter·I`.
///
/// When the plain factorization fails, extra jitter starting at
/// [`JITTER_START`]·mean(diag) is added and grown ×10 until it would exceed
/// [`JITTER_CAP`]·mean(diag).
pub fn cholesky(m: &SymMatrix, jitter: f64) -> Result<CholFactor> {
    if !(jitter >= 0.0) {
        return Err(Error::InvalidParams(format!("jitter must be >= 0, got {jitter}")));
    }
    if m.as_matrix().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix entry".into()));
    }
    let n = m.dim();
    let try_factor = |j: f64| {
        let mut a = m.as_matrix().clone();
        for i in 0..n {
            a[(i, i)] += j;
        }
        Cholesky::new(a)
    };
    if let Some(chol) = try_factor(jitter) {
        return Ok(CholFactor { chol, jitter });
    }
    let scale = m.mean_diag();
    let cap = JITTER_CAP * scale;
    if !(scale > 0.0) {
        return Err(Error::NotPositiveDefinite { cap });
    }
    let mut extra = JITTER_START * scale;
    while extra <= cap * (1.0 + 1e-12) {
        if let Some(chol) = try_factor(jitter + extra) {
            return Ok(CholFactor { chol, jitter: jitter + extra });
        }
        extra *= 10.0;
    }
    Err(Error::NotPositiveDefinite { cap })
}

/// Spectral decomposition `U·diag(λ)·Uᵀ` with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.eigvecs.nrows(), self.eigvecs.ncols(), |i, j| {
            self.eigvecs[(i, j)] * self.eigvals[j]
        });
        scaled * self.eigvecs.transpose()
    }
}

pub fn sym_eigen(m: &SymMatrix) -> Result<SymEigen> {
    let n = m.dim();
    let eig = SymmetricEigen::try_new(m.as_matrix().clone(), f64::EPSILON, 1000 * n.max(1))
        .ok_or(Error::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigvals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let eigvecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEigen { eigvals, eigvecs })
}

/// Ascending eigenvalues `λ` of `m` and `Uᵀ·rhs` for its eigenvectors
/// `U`, without forming `U`.
///
/// Householder tridiagonalization and implicit QL, both applied directly
/// to `rhs`.
pub fn sym_eigen_project(m: &SymMatrix, rhs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.dim();
    if rhs.nrows() != n {
        return Err(Error::DimensionMismatch(format!("sym_eigen_project: matrix {n}x{n}, rhs has {} rows", rhs.nrows())));
    }
    if n == 0 {
        return Ok((DVector::zeros(0), rhs.clone()));
    }
    let mut w = rhs.clone();
    let (mut d, mut e) = tridiagonalize_rows(m.as_matrix().clone(), &mut w);
    tql_rows(&mut d, &mut e, &mut w)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| d[i]));
    let proj = DMatrix::from_fn(n, rhs.ncols(), |r, c| w[(order[r], c)]);
    Ok((vals, proj))
}

/// Householder reduction `a = Q·T·Qᵀ`, replacing `w` by `Qᵀ·w`.
///
/// Returns the diagonal of `T` and its off-diagonal padded with a
/// trailing zero.
fn tridiagonalize_rows(mut a: DMatrix<f64>, w: &mut DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let cols = w.ncols();
    let mut off = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let data = a.as_mut_slice();
    for k in 0..n.saturating_sub(2) {
        let s = k + 1;
        let col = &data[k * n..(k + 1) * n];
        let norm = col[s..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = col[s];
        let alpha = if x0 > 0.0 { -norm } else { norm };
        v[s] = x0 - alpha;
        v[s + 1..n].copy_from_slice(&col[s + 1..]);
        let vtv: f64 = v[s..].iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            off[k] = x0;
            continue;
        }
        let beta = 2.0 / vtv;
        off[k] = alpha;
        for i in s..n {
            let ci = &data[i * n + s..(i + 1) * n];
            p[i] = beta * ci.iter().zip(&v[s..]).map(|(a, b)| a * b).sum::<f64>();
        }
        let kk = 0.5 * beta * p[s..].iter().zip(&v[s..]).map(|(a, b)| a * b).sum::<f64>();
        for i in s..n {
            p[i] -= kk * v[i];
        }
        for j in s..n {
            let (vj, pj) = (v[j], p[j]);
            let cj = &mut data[j * n + s..(j + 1) * n];
            for (idx, c) in cj.iter_mut().enumerate() {
                let i = s + idx;
                *c -= v[i] * pj + p[i] * vj;
            }
        }
        for c in 0..cols {
            let wc = &mut w.as_mut_slice()[c * n..(c + 1) * n];
            let dot = beta * wc[s..].iter().zip(&v[s..]).map(|(a, b)| a * b).sum::<f64>();
            for i in s..n {
                wc[i] -= dot * v[i];
            }
        }
    }
    if n >= 2 {
        off[n - 2] = data[(n - 2) * n + n - 1];
    }
    let diag = (0..n).map(|i| data[i * n + i]).collect();
    (diag, off)
}

/// Implicit QL on the tridiagonal `(d, e)` (`e[i]` couples `i` and `i+1`,
/// `e[n-1] = 0`); each rotation is applied to rows `i, i+1` of `w`.
fn tql_rows(d: &mut [f64], e: &mut [f64], w: &mut DMatrix<f64>) -> Result<()> {
    let n = d.len();
    let cols = w.ncols();
    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let mut iters = 0usize;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            loop {
                iters += 1;
                if iters > 30 * n.max(1) {
                    return Err(Error::NoConvergence);
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let (mut c, mut c2, mut c3) = (1.0, 1.0, 1.0);
                let el1 = e[l + 1];
                let (mut s, mut s2) = (0.0, 0.0);
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..cols {
                        let a = w[(i, k)];
                        let b = w[(i + 1, k)];
                        w[(i + 1, k)] = s * a + c * b;
                        w[(i, k)] = c * a - s * b;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Log density of `N(x | mean, cov)`.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &SymMatrix) -> Result<f64> {
    let chol = cholesky(cov, 0.0)?;
    mvn_logpdf_chol(x, mean, &chol)
}

/// Same as [`mvn_logpdf`] with an existing factorization of the covariance.
pub fn mvn_logpdf_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &CholFactor) -> Result<f64> {
    let n = chol.dim();
    if x.len() != n || mean.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "mvn_logpdf: x has {}, mean has {}, cov is {n}x{n}",
            x.len(),
            mean.len()
        )));
    }
    let z = chol.solve_lower(&(x - mean));
    Ok(-0.5 * (n as f64 * LN_2PI + chol.log_det() + z.norm_squared()))
}

/// `(a ⊗ b)·v` without forming the Kronecker product.
///
/// `v` is indexed `i·N + j` for `a` of size M×M and `b` of size N×N, which
/// is the column-major flattening of an N×M matrix `V`; the product is
/// then `vec(b·V·aᵀ)`.
pub fn kron_mvprod(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = (a.nrows(), b.nrows());
    if a.ncols() != m || b.ncols() != n || v.len() != m * n {
        return Err(Error::DimensionMismatch(format!(
            "kron_mvprod: a {}x{}, b {}x{}, v {}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            v.len()
        )));
    }
    let vm = DMatrix::from_column_slice(n, m, v.as_slice());
    let out = b * vm * a.transpose();
    Ok(DVector::from_column_slice(out.as_slice()))
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
