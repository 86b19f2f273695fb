//! Dense linear algebra for the closed-form solves.
//!
//! [`Matrix`] is a plain row-major `f64` array. Eigendecomposition, SVD and
//! Cholesky are delegated to `nalgebra`; the ridge and regularized Sylvester
//! solves are built on top of them here.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use thiserror::Error;

const EIG_MAX_ITER: usize = 10_000;
const SYMMETRY_TOL: f64 = 1e-9;
/// Condition-number guard for unregularized (lambda == 0) ridge solves.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("iterative decomposition did not converge")]
    NoConvergence,
    #[error("singular system (condition estimate {0:e})")]
    SingularSystem(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("regularization must be positive, got {0}")]
    NonPositiveLambda(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self * other`. Panics on inner dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul row mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t column mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ * v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &s) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += s * a;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|a| a * s).collect())
    }

    pub fn add_diagonal(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += s;
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |r, c| self[(r, idx[c])])
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| self[(rows[r], cols[c])])
    }

    /// Columns `start..start + len`.
    pub fn col_range(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(self.rows, len, |r, c| self[(r, start + c)])
    }

    pub fn hstack(parts: &[Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, Matrix::rows);
        let cols = parts.iter().map(Matrix::cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "hstack row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + p.cols].copy_from_slice(p.row(r));
            }
            off += p.cols;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |a_ij − a_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn symmetrize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, matching `eigenvalues` order.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn reconstruct(&self) -> Matrix {
        let u = &self.eigenvectors;
        let scaled = Matrix::from_fn(u.rows(), u.cols(), |r, c| u[(r, c)] * self.eigenvalues[c]);
        scaled.matmul_t(u)
    }

    /// Eigenvalues with tiny negative noise clamped to zero.
    pub fn clamped_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|&v| v.max(0.0)).collect()
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(LinalgError::NonSquare { rows: a.rows(), cols: a.cols() });
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric(asym));
    }
    Ok(())
}

pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    check_symmetric(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok(SymEig { eigenvalues: vec![], eigenvectors: Matrix::zeros(0, 0) });
    }
    let eig = a
        .symmetrize()
        .to_nalgebra()
        .try_symmetric_eigen(f64::EPSILON, EIG_MAX_ITER)
        .ok_or(LinalgError::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the output order deterministic for repeated eigenvalues
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    normalize_signs(&mut vectors, None);
    Ok(SymEig { eigenvalues, eigenvectors: vectors })
}

/// Flip each column so its largest-magnitude entry is positive, and the
/// paired column in `partner` with it.
fn normalize_signs(m: &mut Matrix, mut partner: Option<&mut Matrix>) {
    for c in 0..m.cols() {
        let mut best = 0.0_f64;
        for r in 0..m.rows() {
            if m[(r, c)].abs() > best.abs() {
                best = m[(r, c)];
            }
        }
        if best < 0.0 {
            for r in 0..m.rows() {
                m[(r, c)] = -m[(r, c)];
            }
            if let Some(p) = partner.as_deref_mut() {
                for r in 0..p.rows() {
                    p[(r, c)] = -p[(r, c)];
                }
            }
        }
    }
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// m × k
    pub u: Matrix,
    /// k = min(m, n), descending and nonnegative.
    pub singular_values: Vec<f64>,
    /// n × k
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let u = &self.u;
        let scaled = Matrix::from_fn(u.rows(), u.cols(), |r, c| u[(r, c)] * self.singular_values[c]);
        scaled.matmul_t(&self.v)
    }

    /// Number of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let max = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > rel_tol * max && s > 0.0).count()
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(LinalgError::NoConvergence);
    }
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd { u: Matrix::zeros(m, 0), singular_values: vec![], v: Matrix::zeros(n, 0) });
    }
    let dec = a
        .to_nalgebra()
        .try_svd(true, true, f64::EPSILON, EIG_MAX_ITER)
        .ok_or(LinalgError::NoConvergence)?;
    let u_na = dec.u.as_ref().ok_or(LinalgError::NoConvergence)?;
    let vt_na = dec.v_t.as_ref().ok_or(LinalgError::NoConvergence)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let singular_values = order.iter().map(|&i| dec.singular_values[i].max(0.0)).collect();
    let mut u = Matrix::from_fn(m, k, |r, c| u_na[(r, order[c])]);
    let mut v = Matrix::from_fn(n, k, |r, c| vt_na[(order[c], r)]);
    normalize_signs(&mut u, Some(&mut v));
    Ok(Svd { u, singular_values, v })
}

/// Condition estimate `λ_max / λ_min` of a symmetric matrix (infinite when
/// the smallest eigenvalue is not positive).
pub fn condition_estimate(a: &Matrix) -> Result<f64> {
    let eig = sym_eig(a)?;
    let max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Solves `X · (gram + λI) = rhs` for X.
///
/// `gram` must be symmetric positive semidefinite. With `lambda == 0` the
/// gram itself must be well conditioned (below [`MAX_CONDITION`]).
pub fn solve_ridge(gram: &Matrix, rhs: &Matrix, lambda: f64) -> Result<Matrix> {
    check_symmetric(gram)?;
    let n = gram.rows();
    if rhs.cols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs has {} columns, gram is {n}x{n}",
            rhs.cols()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(LinalgError::NonPositiveLambda(lambda));
    }
    if n == 0 {
        return Ok(Matrix::zeros(rhs.rows(), 0));
    }
    let system = gram.symmetrize().add_diagonal(lambda);
    if lambda == 0.0 {
        let cond = condition_estimate(&system)?;
        if !(cond < MAX_CONDITION) {
            return Err(LinalgError::SingularSystem(cond));
        }
    }
    let chol = system
        .to_nalgebra()
        .cholesky()
        .ok_or(LinalgError::SingularSystem(f64::INFINITY))?;
    // (G + λI) is symmetric, so X = rhs (G+λI)^{-1} ⇔ (G+λI) Xᵀ = rhsᵀ
    let xt = chol.solve(&rhs.transpose().to_nalgebra());
    Ok(Matrix::from_nalgebra(&xt).transpose())
}

/// Solves the regularized Sylvester equation `g_q · M · g_k + λ M = rhs`.
///
/// Both Grams are diagonalized, `g_q = U D_q Uᵀ` and `g_k = V D_k Vᵀ`; in that
/// basis the equation decouples entrywise.
pub fn solve_sylvester_ridge(g_q: &Matrix, g_k: &Matrix, rhs: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0) {
        return Err(LinalgError::NonPositiveLambda(lambda));
    }
    if !g_q.is_square() || !g_k.is_square() || rhs.rows() != g_q.rows() || rhs.cols() != g_k.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "g_q {:?}, g_k {:?}, rhs {:?}",
            g_q.shape(),
            g_k.shape(),
            rhs.shape()
        )));
    }
    let eq = sym_eig(g_q)?;
    let ek = sym_eig(g_k)?;
    let dq = eq.clamped_eigenvalues();
    let dk = ek.clamped_eigenvalues();
    let u = &eq.eigenvectors;
    let v = &ek.eigenvectors;
    let mut rotated = u.t_matmul(rhs).matmul(v);
    for i in 0..rotated.rows() {
        for j in 0..rotated.cols() {
            rotated[(i, j)] /= dq[i] * dk[j] + lambda;
        }
    }
    Ok(u.matmul(&rotated).matmul_t(v))
}

/// `‖g_q M g_k + λM − rhs‖_max`.
pub fn sylvester_residual(g_q: &Matrix, g_k: &Matrix, m: &Matrix, rhs: &Matrix, lambda: f64) -> f64 {
    g_q.matmul(m).matmul(g_k).add(&m.scale(lambda)).sub(rhs).max_abs()
}
