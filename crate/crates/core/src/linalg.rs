//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// nondecreasing order (columns of the returned matrix follow the same order).
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Flip the sign of `v` so that its largest-magnitude entry is positive.
pub fn orient_column(v: &mut DVector<f64>) {
    let mut best = 0.0_f64;
    for &x in v.iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        v.neg_mut();
    }
}

/// Apply [`orient_column`] to every column of a matrix.
pub fn orient_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut col = m.column(j).clone_owned();
        orient_column(&mut col);
        m.set_column(j, &col);
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix, adding
/// diagonal jitter (escalated ten-fold up to `max_jitter`) if the plain
/// factorization fails. Returns the factor and the jitter that was used.
pub fn cholesky_jittered(
    m: &DMatrix<f64>,
    start_jitter: f64,
    max_jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = start_jitter.max(f64::MIN_POSITIVE);
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut shifted = m.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization(format!(
        "matrix of order {} is not positive definite even with jitter {max_jitter:e}",
        m.nrows()
    )))
}

/// Solve `m x = b` for symmetric positive-definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| Error::rank("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| Error::rank("matrix is not positive definite"))?;
    Ok(chol.inverse())
}

/// Inverse of a general square matrix via LU.
pub fn general_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::rank("matrix is singular"))
}

/// `[1 x]`, the exposure design with intercept.
pub fn exposure_design(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] })
}

/// Column-bind two matrices with the same row count.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hcat row mismatch");
    let (n, ka, kb) = (a.nrows(), a.ncols(), b.ncols());
    DMatrix::from_fn(n, ka + kb, |i, j| if j < ka { a[(i, j)] } else { b[(i, j - ka)] })
}

/// Ordinary least-squares coefficients of `y` on the columns of `a`.
pub fn ols_coefficients(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = a.transpose() * a;
    let rhs = a.transpose() * y;
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::rank(format!("design with {} columns is rank deficient", a.ncols()))
    })?;
    Ok(chol.solve(&rhs))
}

/// Relative Frobenius distance `||a - b|| / max(||b||, tiny)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let rebuilt = &vecs * DMatrix::from_diagonal(&DVector::from_vec(vals)) * vecs.transpose();
        assert!(relative_frobenius(&rebuilt, &m) < 1e-12);
    }

    #[test]
    fn orientation_makes_largest_entry_positive() {
        let mut v = DVector::from_vec(vec![0.1, -0.9, 0.3]);
        orient_column(&mut v);
        assert_eq!(v[1], 0.9);
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jitter) = cholesky_jittered(&m, 1e-10, 1e-6).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-6);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_jittered(&bad, 1e-10, 1e-6),
            Err(Error::Factorization(_))
        ));
    }
}
