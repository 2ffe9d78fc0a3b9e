//! Dense double-precision kernels used by the analytic oracles.
//!
//! Activities are stored as column matrices: each column is one sample, so a
//! single vector is simply an `n x 1` [`Matrix`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{PcnError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative cutoff for the pseudoinverse.
pub const PINV_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;

/// Builds a matrix from row-major entries, rejecting bad lengths and non-finite values.
pub fn matrix_from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Matrix> {
    if entries.len() != rows * cols {
        return Err(PcnError::Shape(format!(
            "{} entries for a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    if let Some(v) = entries.iter().find(|v| !v.is_finite()) {
        return Err(PcnError::NonFinite(format!("matrix entry {v}")));
    }
    Ok(Matrix::from_row_slice(rows, cols, entries))
}

/// Builds a finite vector.
pub fn vector_from_slice(entries: &[f64]) -> Result<Vector> {
    if let Some(v) = entries.iter().find(|v| !v.is_finite()) {
        return Err(PcnError::NonFinite(format!("vector entry {v}")));
    }
    Ok(Vector::from_column_slice(entries))
}

/// A single column matrix holding `entries`.
pub fn col(entries: &[f64]) -> Matrix {
    Matrix::from_column_slice(entries.len(), 1, entries)
}

/// Reinterprets a vector as a one-column matrix.
pub fn vector_to_col(v: &Vector) -> Matrix {
    Matrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Largest absolute entry; zero for empty matrices.
pub fn sup_norm(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest absolute entry of `a - b`.
pub fn sup_dist(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// `dst += alpha * src`, in place.
pub fn add_scaled(dst: &mut Matrix, alpha: f64, src: &Matrix) {
    dst.zip_apply(src, |d, s| *d += alpha * s);
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn require_square(m: &Matrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(PcnError::Shape(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn require_symmetric(m: &Matrix) -> Result<()> {
    require_square(m)?;
    let scale = sup_norm(m).max(1.0);
    let asymmetry = max_asymmetry(m);
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(PcnError::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Moore-Penrose pseudoinverse via SVD. Singular values below
/// `tol * sigma_max` are treated as zero.
///
/// The SVD comes from faer: nalgebra's bidiagonal SVD returns factors that do
/// not reconstruct some exactly rank-deficient inputs.
pub fn pseudoinverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(PcnError::EmptyMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if !all_finite(m) {
        return Err(PcnError::NonFinite("pseudoinverse input".into()));
    }
    if tol < 0.0 {
        return Err(PcnError::InvalidSettings(format!(
            "pseudoinverse tolerance {tol} is negative"
        )));
    }
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let svd = f
        .thin_svd()
        .map_err(|e| PcnError::NonFinite(format!("SVD did not converge: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let s = svd.S().column_vector();
    let sigma_max = (0..s.nrows()).map(|k| s[k]).fold(0.0_f64, f64::max);
    let cutoff = tol * sigma_max;
    let kept: Vec<(usize, f64)> = (0..s.nrows())
        .filter(|&k| s[k] > cutoff && s[k] > 0.0)
        .map(|k| (k, 1.0 / s[k]))
        .collect();
    // V diag(1/s) U^T over the kept singular triplets
    Ok(Matrix::from_fn(m.ncols(), m.nrows(), |i, j| {
        kept.iter().map(|&(k, inv)| v[(i, k)] * inv * u[(j, k)]).sum()
    }))
}

/// Solves `a x = b` for symmetric positive-definite `a` by Cholesky factorization.
/// `b` may hold several right-hand sides as columns.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    require_symmetric(a)?;
    if a.nrows() != b.nrows() {
        return Err(PcnError::Shape(format!(
            "spd system is {}x{} but rhs has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or(PcnError::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

/// Solves a general square system by LU with partial pivoting.
pub fn solve_general(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    require_square(a)?;
    if a.nrows() != b.nrows() {
        return Err(PcnError::Shape(format!(
            "system is {}x{} but rhs has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let lu = a.clone().lu();
    let x = lu.solve(b).ok_or(PcnError::Singular)?;
    if !all_finite(&x) {
        return Err(PcnError::Singular);
    }
    Ok(x)
}

/// `exp(m * t)` by scaling and squaring around a truncated Taylor series.
pub fn matrix_exponential(m: &Matrix, t: f64) -> Result<Matrix> {
    require_square(m)?;
    let n = m.nrows();
    let a = m * t;
    let norm = a.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    // Scale until the 1-norm is at most 1/2; 20 Taylor terms then leave a
    // remainder far below double precision.
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut result = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue_symmetric(m: &Matrix) -> Result<f64> {
    require_symmetric(m)?;
    if m.nrows() == 0 {
        return Err(PcnError::EmptyMatrix { rows: 0, cols: 0 });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// `I + W^T W`, the per-layer curvature of the linear free energy.
pub fn shifted_gram(w: &Matrix) -> Matrix {
    let n = w.ncols();
    Matrix::identity(n, n) + w.transpose() * w
}
