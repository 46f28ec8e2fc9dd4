//! Small dense linear algebra wrappers around nalgebra.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Solve a general square system by LU with partial pivoting.
pub fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::invalid("lu_solve: shape mismatch"));
    }
    let x = a
        .lu()
        .solve(b)
        .ok_or_else(|| Error::numerical("singular matrix in LU solve"))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::numerical("non-finite LU solution"))
    }
}

/// Solve a symmetric positive definite system by Cholesky.
pub fn cholesky_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

/// Row-major flat buffer into an nalgebra matrix.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}
