//! Dense row-major `f64` matrices and the deterministic factorizations the
//! rest of the crate is built on.
//!
//! Everything here is written for reproducibility first: fixed summation
//! order in products, a fixed cyclic sweep order in the Jacobi SVD, no
//! parallelism, and a fixed sign convention on singular vectors. Calling any
//! operation twice on bit-identical input yields bit-identical output.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: columns of the work
//! matrix are rotated in pairs until every pair is mutually orthogonal to
//! relative tolerance 1e-12, at which point column norms are the singular
//! values. It is slower than blocked LAPACK-style bidiagonalization but is
//! simple to audit and accurate to near machine precision on the desk-scale
//! shapes this crate targets (≤ a few hundred rows/cols).

use thiserror::Error;

/// Relative off-diagonal tolerance at which a Jacobi column pair counts as
/// orthogonal: |⟨w_p, w_q⟩| ≤ tol · ‖w_p‖ ‖w_q‖.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Hard cap on Jacobi sweeps; random desk-scale inputs converge in < 15.
pub const JACOBI_MAX_SWEEPS: usize = 60;
/// Columns whose norm falls below this fraction of the whole matrix norm
/// are deflated: they carry no resolvable spectral weight, their pairwise
/// angles are dominated by rounding noise (so the relative tolerance above
/// could never be met), and they are replaced by exact zeros at extraction.
pub const JACOBI_DEFLATE_REL: f64 = 1e-14;
/// Gram defect allowed when constructing an [`OrthonormalBasis`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;
/// A QR factorization counts as rank-deficient when a diagonal of R falls
/// at or below this fraction of ‖A‖_F.
pub const QR_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must have nonzero dimensions, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("data length {got} does not match {rows}x{cols} = {expected}")]
    DataLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry at ({row},{col}) in {context}")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
    },
    #[error("{context}: shape mismatch, lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        context: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("SVD did not converge after {sweeps} sweeps; off-diagonal norm {off_diagonal:.3e}")]
    SvdNotConverged { sweeps: usize, off_diagonal: f64 },
    #[error("QR rank deficiency at column {column}: |R[{column},{column}]| = {diag:.3e} ≤ {tol:.3e}")]
    RankDeficient { column: usize, diag: f64, tol: f64 },
    #[error("QR requires cols ≤ rows, got {rows}x{cols}")]
    WideMatrix { rows: usize, cols: usize },
    #[error("columns are not orthonormal: max |BᵀB − I| = {defect:.3e} exceeds {tol:.3e}")]
    NotOrthonormal { defect: f64, tol: f64 },
}

/// Dense row-major matrix. `data[r * cols + c]` is entry (r, c).
///
/// Invariants: `rows > 0`, `cols > 0`, `data.len() == rows * cols`, and all
/// entries finite. [`Matrix::new`] checks all four; in-place mutation through
/// `data` is the caller's responsibility (the train loop re-checks by
/// monitoring the loss).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("Matrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-dimension matrix");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        debug_assert!(v.is_finite());
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Copy of columns `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols, "column range out of bounds");
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn plus(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.same_shape(other, "plus")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn minus(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.same_shape(other, "minus")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// self += s · other, entry-wise.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<(), LinalgError> {
        self.same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn same_shape(&self, other: &Matrix, context: &'static str) -> Result<(), LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                context,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        Ok(())
    }

    fn check_finite(&self, context: &'static str) -> Result<(), LinalgError> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.data[r * self.cols + c].is_finite() {
                    return Err(LinalgError::NonFinite {
                        context,
                        row: r,
                        col: c,
                    });
                }
            }
        }
        Ok(())
    }

    /// Bit-level equality, distinguishing e.g. −0.0 from +0.0.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Dot product with fixed left-to-right summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// a · b. Accumulation over the inner index runs in ascending order for every
/// output entry, so the result is reproducible bit-for-bit.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::ShapeMismatch {
            context: "matmul",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// aᵀ · b, without materializing the transpose. Same ascending-k summation
/// order per output entry as [`matmul`].
pub fn matmul_transa(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::ShapeMismatch {
            context: "matmul_transa",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for i in 0..a.cols {
            let aki = arow[i];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aki * brow[j];
            }
        }
    }
    Ok(out)
}

/// a · bᵀ; output entry (i, j) is the dot of row i of `a` with row j of `b`.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.cols {
        return Err(LinalgError::ShapeMismatch {
            context: "matmul_transb",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// Thin SVD: `a = u · diag(sigma) · vᵀ` with `u` of shape m×p, `v` of shape
/// n×p, p = min(m, n), and `sigma` non-negative descending.
///
/// Sign convention: in every column of `u` the entry of largest magnitude is
/// non-negative (ties broken by lowest row index); the matching column of `v`
/// is flipped together with it, so the reconstruction is unchanged.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    /// min(m, n) — the number of singular values carried.
    pub fn p(&self) -> usize {
        self.sigma.len()
    }
}

/// One-sided Jacobi SVD. Deterministic: fixed cyclic pair order, no data-
/// dependent branching apart from the rotation threshold itself.
///
/// Converges when a full sweep applies no rotation, i.e. every column pair
/// satisfies |⟨w_p, w_q⟩| ≤ 1e-12 ‖w_p‖ ‖w_q‖. Columns whose norm underflows
/// to exactly zero (rank-deficient input) are replaced by a deterministic
/// Gram–Schmidt completion so `u` always has orthonormal columns.
pub fn svd(a: &Matrix) -> Result<SvdFactors, LinalgError> {
    a.check_finite("svd")?;
    if a.rows >= a.cols {
        let mut f = svd_tall(a)?;
        fix_signs(&mut f.u, &mut f.v);
        Ok(f)
    } else {
        let t = a.transpose();
        let f = svd_tall(&t)?;
        let mut swapped = SvdFactors {
            u: f.v,
            sigma: f.sigma,
            v: f.u,
        };
        fix_signs(&mut swapped.u, &mut swapped.v);
        Ok(swapped)
    }
}

fn svd_tall(a: &Matrix) -> Result<SvdFactors, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    debug_assert!(m >= n);
    let mut w = a.clone();
    let mut v = Matrix::identity(n);

    // Rotations preserve the Frobenius norm, so the deflation floor for
    // negligible columns can be fixed once, up front.
    let deflate_sq = a.frobenius_norm_sq() * JACOBI_DEFLATE_REL * JACOBI_DEFLATE_REL;

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (app, aqq, apq) = column_grams(&w, p, q);
                if app <= deflate_sq
                    || aqq <= deflate_sq
                    || apq.abs() <= JACOBI_REL_TOL * (app * aqq).sqrt()
                {
                    continue;
                }
                // Rotation angle from apq·t² + (aqq − app)·t − apq = 0,
                // stable root; sign(0) taken as +1 for determinism.
                let theta = (aqq - app) / (2.0 * apq);
                let t = {
                    let s = if theta >= 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        // Re-verify: the final sweep may have finished the job.
        let mut off = 0.0;
        let mut dirty = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (app, aqq, apq) = column_grams(&w, p, q);
                off += apq * apq;
                if app > deflate_sq
                    && aqq > deflate_sq
                    && apq.abs() > JACOBI_REL_TOL * (app * aqq).sqrt()
                {
                    dirty = true;
                }
            }
        }
        if dirty {
            return Err(LinalgError::SvdNotConverged {
                sweeps: JACOBI_MAX_SWEEPS,
                off_diagonal: off.sqrt(),
            });
        }
    }

    // Column norms are the singular values; sort descending, ties by
    // original column index so the permutation is unique.
    let mut sigma_raw = vec![0.0; n];
    for j in 0..n {
        let mut s = 0.0;
        for r in 0..m {
            let x = w.data[r * n + j];
            s += x * x;
        }
        sigma_raw[j] = s.sqrt();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sigma_raw[j]
            .partial_cmp(&sigma_raw[i])
            .expect("singular values are finite")
            .then(i.cmp(&j))
    });

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut sigma = vec![0.0; n];
    let mut need_fill: Vec<usize> = Vec::new();
    for (jj, &j) in order.iter().enumerate() {
        for r in 0..n {
            v_sorted.data[r * n + jj] = v.data[r * n + j];
        }
        if sigma_raw[j] * sigma_raw[j] > deflate_sq {
            sigma[jj] = sigma_raw[j];
            let inv = 1.0 / sigma_raw[j];
            for r in 0..m {
                u.data[r * n + jj] = w.data[r * n + j] * inv;
            }
        } else {
            // Deflated column: below the resolvable spectrum, and possibly
            // never rotated against its peers, so its direction is noise.
            sigma[jj] = 0.0;
            need_fill.push(jj);
        }
    }
    for jj in need_fill {
        fill_orthonormal_column(&mut u, jj);
    }

    Ok(SvdFactors {
        u,
        sigma,
        v: v_sorted,
    })
}

fn column_grams(w: &Matrix, p: usize, q: usize) -> (f64, f64, f64) {
    let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
    let n = w.cols;
    for r in 0..w.rows {
        let wp = w.data[r * n + p];
        let wq = w.data[r * n + q];
        app += wp * wp;
        aqq += wq * wq;
        apq += wp * wq;
    }
    (app, aqq, apq)
}

fn rotate_columns(w: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = w.cols;
    for r in 0..w.rows {
        let wp = w.data[r * n + p];
        let wq = w.data[r * n + q];
        w.data[r * n + p] = c * wp - s * wq;
        w.data[r * n + q] = s * wp + c * wq;
    }
}

/// Replace column `jj` of `u` (currently zero) with a unit vector orthogonal
/// to every other nonzero column. Candidate standard-basis vectors are ranked
/// by residual norm after projecting out the existing columns; ties go to the
/// lowest row index, so the completion is deterministic.
fn fill_orthonormal_column(u: &mut Matrix, jj: usize) {
    let (m, n) = (u.rows, u.cols);
    let mut best = (0usize, -1.0f64);
    for cand in 0..m {
        // Residual² of e_cand against the current columns: 1 − Σ_j u[cand,j]².
        let mut proj_sq = 0.0;
        for j in 0..n {
            if j == jj {
                continue;
            }
            let x = u.data[cand * n + j];
            proj_sq += x * x;
        }
        let res = 1.0 - proj_sq;
        if res > best.1 {
            best = (cand, res);
        }
    }
    let cand = best.0;
    let mut col = vec![0.0; m];
    col[cand] = 1.0;
    // Two Gram–Schmidt passes for numerical hygiene.
    for _ in 0..2 {
        for j in 0..n {
            if j == jj {
                continue;
            }
            let mut d = 0.0;
            for r in 0..m {
                d += col[r] * u.data[r * n + j];
            }
            if d != 0.0 {
                for r in 0..m {
                    col[r] -= d * u.data[r * n + j];
                }
            }
        }
    }
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    // The best standard-basis candidate keeps residual² ≥ 1/m against any
    // proper subspace, so the completion never truly degenerates.
    debug_assert!(
        norm * norm > 0.25 / m as f64,
        "orthonormal completion degenerated: norm {norm} with m={m}"
    );
    for r in 0..m {
        u.data[r * n + jj] = col[r] / norm;
    }
}

fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    let p = u.cols.min(v.cols);
    for j in 0..p {
        let mut best_row = 0usize;
        let mut best_abs = -1.0f64;
        for r in 0..u.rows {
            let a = u.data[r * u.cols + j].abs();
            if a > best_abs {
                best_abs = a;
                best_row = r;
            }
        }
        if u.data[best_row * u.cols + j] < 0.0 {
            for r in 0..u.rows {
                u.data[r * u.cols + j] = -u.data[r * u.cols + j];
            }
            for r in 0..v.rows {
                v.data[r * v.cols + j] = -v.data[r * v.cols + j];
            }
        }
    }
}

/// Matrix with verified orthonormal columns (Gram defect ≤ 1e-10).
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    mat: Matrix,
}

impl OrthonormalBasis {
    pub fn new(mat: Matrix) -> Result<Self, LinalgError> {
        let defect = gram_defect(&mat)?;
        if defect > ORTHONORMAL_TOL {
            return Err(LinalgError::NotOrthonormal {
                defect,
                tol: ORTHONORMAL_TOL,
            });
        }
        Ok(OrthonormalBasis { mat })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn rows(&self) -> usize {
        self.mat.rows
    }

    pub fn cols(&self) -> usize {
        self.mat.cols
    }
}

/// max |BᵀB − I| over all entries.
pub fn gram_defect(b: &Matrix) -> Result<f64, LinalgError> {
    b.check_finite("gram_defect")?;
    let g = matmul_transa(b, b)?;
    let mut defect = 0.0f64;
    for i in 0..g.rows {
        for j in 0..g.cols {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((g.get(i, j) - target).abs());
        }
    }
    Ok(defect)
}

/// Householder QR, returning the thin orthonormal factor Q (same shape as the
/// input). Errors with the offending column index when a diagonal of R falls
/// to ≤ 1e-12 · ‖A‖_F, i.e. when the input is numerically rank-deficient.
pub fn qr_orthonormal(a: &Matrix) -> Result<OrthonormalBasis, LinalgError> {
    a.check_finite("qr_orthonormal")?;
    let (m, n) = (a.rows, a.cols);
    if n > m {
        return Err(LinalgError::WideMatrix { rows: m, cols: n });
    }
    let tol = QR_RANK_TOL * a.frobenius_norm();
    let mut r = a.clone();
    // Householder vectors, one per column, each of length m − k.
    let mut hh: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = vec![0.0; m - k];
        for i in k..m {
            x[i - k] = r.data[i * n + k];
        }
        let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_x <= tol {
            return Err(LinalgError::RankDeficient {
                column: k,
                diag: norm_x,
                tol,
            });
        }
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x;
        v[0] += sign * norm_x;
        let vnorm_sq: f64 = v.iter().map(|t| t * t).sum();
        // vnorm_sq > 0 because norm_x > 0.
        // Apply H = I − 2vvᵀ/‖v‖² to the trailing block of R.
        for j in k..n {
            let mut d = 0.0;
            for i in k..m {
                d += v[i - k] * r.data[i * n + j];
            }
            let f = 2.0 * d / vnorm_sq;
            for i in k..m {
                r.data[i * n + j] -= f * v[i - k];
            }
        }
        let diag = r.data[k * n + k].abs();
        if diag <= tol {
            return Err(LinalgError::RankDeficient {
                column: k,
                diag,
                tol,
            });
        }
        hh.push(v);
    }
    // Q = H_0 · H_1 ⋯ H_{n-1} · [I_n; 0], applied in reverse.
    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q.data[j * n + j] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &hh[k];
        let vnorm_sq: f64 = v.iter().map(|t| t * t).sum();
        for j in 0..n {
            let mut d = 0.0;
            for i in k..m {
                d += v[i - k] * q.data[i * n + j];
            }
            let f = 2.0 * d / vnorm_sq;
            for i in k..m {
                q.data[i * n + j] -= f * v[i - k];
            }
        }
    }
    OrthonormalBasis::new(q)
}

/// Orthogonal projector B·Bᵀ onto the column span of the basis.
pub fn projector(b: &OrthonormalBasis) -> Matrix {
    matmul_transb(b.matrix(), b.matrix()).expect("basis shapes always agree")
}

/// Largest singular value, computed through [`svd`]. Zero matrices give 0.
pub fn spectral_norm(a: &Matrix) -> Result<f64, LinalgError> {
    Ok(svd(a)?.sigma.first().copied().unwrap_or(0.0))
}

/// Matrix with i.i.d. Gaussian entries, mean 0 and the given standard
/// deviation, drawn row-major from `rng`.
pub fn gaussian<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *v = z * std;
    }
    m
}
