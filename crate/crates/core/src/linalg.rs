//! Dense vector/matrix primitives, a rank-revealing least-squares solver,
//! and Gram-Schmidt orthonormalization.
//!
//! The solver uses Householder QR with column pivoting and, for
//! rank-deficient systems, completes the factorization to obtain the
//! minimum-norm solution. Raw normal equations are avoided throughout so
//! near-collinear latent dimensions stay solvable.

#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use thiserror::Error;

/// Tolerance below which a vector is considered linearly dependent on the
/// ones before it, relative to its own norm.
pub const DEFAULT_DEPENDENCE_TOL: f64 = 1e-9;

/// Relative rank threshold for the pivoted QR: diagonal entries at or below
/// `RANK_REL_TOL` times the largest diagonal magnitude are treated as zero.
pub const RANK_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty system: at least one row/element required")]
    Empty,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("vector at index {index} is linearly dependent on the preceding ones (residual norm {residual:.3e})")]
    LinearDependence { index: usize, residual: f64 },
    #[error("basis is not orthonormal: |e[{i}]^T e[{j}] - delta| = {deviation:.3e} exceeds {tol:.1e}")]
    NotOrthonormal {
        i: usize,
        j: usize,
        deviation: f64,
        tol: f64,
    },
    #[error("zero-norm vector where a direction is required")]
    ZeroNorm,
}

/// Dense vector of 64-bit reals. Finite and non-empty by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(format!(
                "vector element {i} = {}",
                data[i]
            )));
        }
        Ok(Self { data })
    }

    /// Construction path for values produced by internal arithmetic.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty() && data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot: dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + alpha * other`, allocating.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "axpy: dimension mismatch");
        Self::from_raw(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self::from_raw(self.data.iter().map(|a| a * alpha).collect())
    }

    /// Elementwise division by a scalar; exact normalization path.
    pub fn div_scalar(&self, denom: f64) -> Self {
        Self::from_raw(self.data.iter().map(|a| a / denom).collect())
    }

    /// Returns `self / ||self||`, or an error on a zero vector.
    pub fn normalized(&self) -> Result<Self, LinalgError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(LinalgError::ZeroNorm);
        }
        Ok(self.div_scalar(n))
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Dense row-major matrix of 64-bit reals. Finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "matrix {rows}x{cols} requires {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(format!(
                "matrix element {i} = {}",
                data[i]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self, LinalgError> {
        if rows.is_empty() {
            return Err(LinalgError::Empty);
        }
        let cols = rows[0].dim();
        for (i, r) in rows.iter().enumerate() {
            if r.dim() != cols {
                return Err(LinalgError::DimensionMismatch(format!(
                    "row {i} has dim {}, expected {cols}",
                    r.dim()
                )));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r.as_slice());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.dim(), "matvec: dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            *o = row.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
        }
        Vector::from_raw(out)
    }

    pub fn transpose_matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.rows, v.dim(), "transpose_matvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let s = v.as_slice()[r];
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += s * a;
            }
        }
        Vector::from_raw(out)
    }
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub struct OlsSolution {
    /// Weight vector; when the intercept flag was set the intercept is
    /// `weights[0]` and the per-dimension weights follow.
    pub weights: Vector,
    pub residual_sum_squares: f64,
    /// True when the design matrix did not have full column rank; the
    /// returned weights are then the minimum-norm solution.
    pub rank_deficient: bool,
    /// Numerical rank detected by the pivoted factorization.
    pub rank: usize,
}

/// Ordinary least squares via Householder QR with column pivoting.
///
/// Minimizes `||y - X w||^2`. Rank-deficient systems return the
/// minimum-norm solution and set `rank_deficient`.
pub fn solve_ols(x: &Matrix, y: &Vector, add_intercept: bool) -> Result<OlsSolution, LinalgError> {
    if x.rows() != y.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "design has {} rows but y has {} entries",
            x.rows(),
            y.dim()
        )));
    }
    let n = x.rows();
    let q = if add_intercept { x.cols() + 1 } else { x.cols() };

    // Column-major working copy, with the all-ones intercept column first.
    let mut a = vec![0.0; n * q];
    if add_intercept {
        a[..n].fill(1.0);
        for r in 0..n {
            for c in 0..x.cols() {
                a[(c + 1) * n + r] = x.get(r, c);
            }
        }
    } else {
        for r in 0..n {
            for c in 0..x.cols() {
                a[c * n + r] = x.get(r, c);
            }
        }
    }

    let fact = qr_col_pivot(&mut a, n, q);
    let rank = fact.rank;

    // Q^T y
    let mut qty = y.as_slice().to_vec();
    for k in 0..fact.reflectors.len() {
        apply_reflector(&fact.reflectors[k], k, &mut qty);
    }

    // Solve for the permuted weights z.
    let z = if rank == q {
        back_substitute(&a, n, q, &qty)
    } else {
        min_norm_solution(&a, n, q, rank, &qty)
    };

    let mut weights = vec![0.0; q];
    for (i, &p) in fact.perm.iter().enumerate() {
        weights[p] = z[i];
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite(
            "least-squares solution is not finite".into(),
        ));
    }

    // Residual computed against the original system.
    let mut rss = 0.0;
    for r in 0..n {
        let mut pred = 0.0;
        if add_intercept {
            pred += weights[0];
            for c in 0..x.cols() {
                pred += weights[c + 1] * x.get(r, c);
            }
        } else {
            for c in 0..x.cols() {
                pred += weights[c] * x.get(r, c);
            }
        }
        let e = y.as_slice()[r] - pred;
        rss += e * e;
    }

    Ok(OlsSolution {
        weights: Vector::new(weights)?,
        residual_sum_squares: rss,
        rank_deficient: rank < q,
        rank,
    })
}

struct Reflector {
    /// Householder vector over rows `k..n`, scaled so that applying
    /// `I - beta v v^T` annihilates the subdiagonal of column `k`.
    v: Vec<f64>,
    beta: f64,
}

struct PivotedQr {
    reflectors: Vec<Reflector>,
    perm: Vec<usize>,
    rank: usize,
}

/// In-place Householder QR with column pivoting on a column-major `n x q`
/// buffer. On return the upper triangle of `a` holds R (in pivoted column
/// order) and the rank is determined against `RANK_REL_TOL`.
fn qr_col_pivot(a: &mut [f64], n: usize, q: usize) -> PivotedQr {
    let kmax = n.min(q);
    let mut perm: Vec<usize> = (0..q).collect();
    let mut reflectors = Vec::with_capacity(kmax);
    let mut diag = Vec::with_capacity(kmax);

    for k in 0..kmax {
        // Exact remaining column norms; cheap at our scales and immune to
        // the cancellation issues of downdating formulas.
        let mut best = k;
        let mut best_norm = -1.0;
        for c in k..q {
            let col = &a[c * n + k..c * n + n];
            let nrm: f64 = col.iter().map(|v| v * v).sum();
            if nrm > best_norm {
                best_norm = nrm;
                best = c;
            }
        }
        if best != k {
            perm.swap(k, best);
            for r in 0..n {
                a.swap(k * n + r, best * n + r);
            }
        }

        // Householder vector for column k, rows k..n.
        let col_norm = best_norm.max(0.0).sqrt();
        if col_norm == 0.0 {
            diag.push(0.0);
            reflectors.push(Reflector {
                v: vec![0.0; n - k],
                beta: 0.0,
            });
            continue;
        }
        let x0 = a[k * n + k];
        let alpha = if x0 >= 0.0 { -col_norm } else { col_norm };
        let mut v: Vec<f64> = a[k * n + k..k * n + n].to_vec();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|t| t * t).sum();
        let beta = if vtv == 0.0 { 0.0 } else { 2.0 / vtv };

        a[k * n + k] = alpha;
        for r in k + 1..n {
            a[k * n + r] = 0.0;
        }
        for c in k + 1..q {
            let col = &mut a[c * n..(c + 1) * n];
            let mut w = 0.0;
            for (i, vi) in v.iter().enumerate() {
                w += vi * col[k + i];
            }
            w *= beta;
            for (i, vi) in v.iter().enumerate() {
                col[k + i] -= w * vi;
            }
        }
        diag.push(alpha.abs());
        reflectors.push(Reflector { v, beta });
    }

    let dmax = diag.iter().cloned().fold(0.0_f64, f64::max);
    let thresh = RANK_REL_TOL * dmax;
    let mut rank = 0;
    for &d in &diag {
        if d > thresh && d > 0.0 {
            rank += 1;
        } else {
            break;
        }
    }

    PivotedQr {
        reflectors,
        perm,
        rank,
    }
}

fn apply_reflector(h: &Reflector, k: usize, target: &mut [f64]) {
    if h.beta == 0.0 {
        return;
    }
    let mut w = 0.0;
    for (i, vi) in h.v.iter().enumerate() {
        w += vi * target[k + i];
    }
    w *= h.beta;
    for (i, vi) in h.v.iter().enumerate() {
        target[k + i] -= w * vi;
    }
}

/// Back substitution on the full-rank upper-triangular R stored column-major.
fn back_substitute(a: &[f64], n: usize, q: usize, qty: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; q];
    for i in (0..q).rev() {
        let mut s = qty[i];
        for j in i + 1..q {
            s -= a[j * n + i] * z[j];
        }
        z[i] = s / a[i * n + i];
    }
    z
}

/// Minimum-norm solution of the rank-`r` trapezoidal system `R1 z = c1`
/// where `R1` is the first `r` rows of R. A second (unpivoted) QR of
/// `R1^T` yields `R1 = S^T U^T`; forward substitution and an application
/// of the stored reflectors produce `z = U (S^T)^{-1} c1`, which is the
/// solution of least Euclidean norm.
fn min_norm_solution(a: &[f64], n: usize, q: usize, r: usize, qty: &[f64]) -> Vec<f64> {
    if r == 0 {
        return vec![0.0; q];
    }
    // b = R1^T, column-major q x r: b[col j][row i] = R[j][i] = a[i*n + j].
    // Row j of R has entries in columns j..q.
    let mut b = vec![0.0; q * r];
    for j in 0..r {
        for i in j..q {
            b[j * q + i] = a[i * n + j];
        }
    }

    // Householder QR of b (q x r, q >= r), no pivoting.
    let mut refl: Vec<Reflector> = Vec::with_capacity(r);
    for k in 0..r {
        let col = &b[k * q + k..(k + 1) * q];
        let col_norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if col_norm == 0.0 {
            refl.push(Reflector {
                v: vec![0.0; q - k],
                beta: 0.0,
            });
            continue;
        }
        let x0 = b[k * q + k];
        let alpha = if x0 >= 0.0 { -col_norm } else { col_norm };
        let mut v: Vec<f64> = b[k * q + k..(k + 1) * q].to_vec();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|t| t * t).sum();
        let beta = if vtv == 0.0 { 0.0 } else { 2.0 / vtv };
        b[k * q + k] = alpha;
        for t in k + 1..q {
            b[k * q + t] = 0.0;
        }
        for c in k + 1..r {
            let colc = &mut b[c * q..(c + 1) * q];
            let mut w = 0.0;
            for (i, vi) in v.iter().enumerate() {
                w += vi * colc[k + i];
            }
            w *= beta;
            for (i, vi) in v.iter().enumerate() {
                colc[k + i] -= w * vi;
            }
        }
        refl.push(Reflector { v, beta });
    }

    // Forward substitution: S^T t = c1 with S upper triangular r x r in b.
    let mut t = vec![0.0; r];
    for i in 0..r {
        let mut s = qty[i];
        for j in 0..i {
            // (S^T)[i][j] = S[j][i] = b[i*q + j]
            s -= b[i * q + j] * t[j];
        }
        t[i] = s / b[i * q + i];
    }

    // z = U t = Q [t; 0], applying reflectors in reverse order.
    let mut z = vec![0.0; q];
    z[..r].copy_from_slice(&t);
    for k in (0..r).rev() {
        apply_reflector(&refl[k], k, &mut z);
    }
    z
}

/// Modified Gram-Schmidt orthonormalization with one re-orthogonalization
/// pass. Order-sensitive: earlier vectors keep their direction, and the
/// first output is exactly `input[0] / ||input[0]||`.
///
/// `tol` is relative to each input vector's norm; a vector whose residual
/// falls below it is reported as linearly dependent.
pub fn gram_schmidt(vectors: &[Vector], tol: f64) -> Result<Vec<Vector>, LinalgError> {
    assert!(tol > 0.0, "dependence tolerance must be positive");
    if vectors.is_empty() {
        return Ok(Vec::new());
    }
    let dim = vectors[0].dim();
    for (i, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(LinalgError::DimensionMismatch(format!(
                "vector {i} has dim {}, expected {dim}",
                v.dim()
            )));
        }
    }

    let mut out: Vec<Vector> = Vec::with_capacity(vectors.len());
    for (idx, v) in vectors.iter().enumerate() {
        let mut u = v.clone();
        for _pass in 0..2 {
            for e in &out {
                let c = e.dot(&u);
                u = u.axpy(-c, e);
            }
        }
        let residual = u.norm();
        if residual < tol * v.norm() || residual == 0.0 {
            return Err(LinalgError::LinearDependence {
                index: idx,
                residual,
            });
        }
        out.push(u.div_scalar(residual));
    }
    Ok(out)
}

/// Verifies pairwise orthonormality of `basis` to within `tol`.
pub fn check_orthonormal(basis: &[Vector], tol: f64) -> Result<(), LinalgError> {
    for i in 0..basis.len() {
        for j in i..basis.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            let deviation = (basis[i].dot(&basis[j]) - target).abs();
            if deviation > tol {
                return Err(LinalgError::NotOrthonormal {
                    i,
                    j,
                    deviation,
                    tol,
                });
            }
        }
    }
    Ok(())
}

/// Component of `v` perpendicular to the span of an orthonormal basis:
/// `v - sum_i (e_i^T v) e_i`, with a refinement pass so the result is
/// orthogonal to every basis vector to within `1e-12 * ||v||`.
pub fn residual_perp(v: &Vector, basis: &[Vector]) -> Result<Vector, LinalgError> {
    for (i, e) in basis.iter().enumerate() {
        if e.dim() != v.dim() {
            return Err(LinalgError::DimensionMismatch(format!(
                "basis vector {i} has dim {}, expected {}",
                e.dim(),
                v.dim()
            )));
        }
    }
    check_orthonormal(basis, 1e-8)?;
    let mut u = v.clone();
    for _pass in 0..2 {
        for e in basis {
            let c = e.dot(&u);
            u = u.axpy(-c, e);
        }
    }
    Ok(u)
}

/// Cosine of the angle between two non-zero vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(LinalgError::ZeroNorm);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}
