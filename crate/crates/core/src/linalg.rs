//! Dense helpers shared by the observers and channel learners.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which a symmetric system is solved in the
/// least-squares sense.
pub const ILL_CONDITIONED: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct SymmetricSolve {
    pub solution: DVector<f64>,
    /// Largest over smallest eigenvalue; infinite when singular.
    pub condition: f64,
    /// True when the least-squares path was taken.
    pub degenerate: bool,
}

/// Solves `a·x = b` for symmetric positive semi-definite `a`.
///
/// Well-conditioned systems go through a Cholesky factorisation. Otherwise
/// the minimum-norm least-squares solution is returned from the
/// eigendecomposition, discarding eigenvalues below `λ_max · n · ε`.
pub fn solve_symmetric_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<SymmetricSolve> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::mismatch(n, a.ncols(), "square matrix"));
    }
    if b.len() != n {
        return Err(Error::mismatch(n, b.len(), "right-hand side"));
    }
    if !a.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite entries in linear system"));
    }
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };

    if condition <= ILL_CONDITIONED {
        if let Some(chol) = a.clone().cholesky() {
            return Ok(SymmetricSolve {
                solution: chol.solve(b),
                condition,
                degenerate: false,
            });
        }
    }
    let cutoff = max * n as f64 * f64::EPSILON;
    let coeffs = eig.eigenvectors.transpose() * b;
    let mut scaled = coeffs;
    for (c, &lambda) in scaled.iter_mut().zip(eig.eigenvalues.iter()) {
        *c = if lambda > cutoff { *c / lambda } else { 0.0 };
    }
    Ok(SymmetricSolve {
        solution: &eig.eigenvectors * scaled,
        condition,
        degenerate: true,
    })
}

/// Per-column means and unbiased covariance of the columns of `data`
/// (one sample per column).
pub fn column_moments(data: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let count = data.ncols();
    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let denom = (count.max(2) - 1) as f64;
    let cov = (&centered * centered.transpose()) / denom;
    (mean, cov)
}

/// Largest principal angle (radians) between the row spaces of `a` and `b`.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.transpose().qr().q();
    let qb = b.transpose().qr().q();
    let cross = qa.transpose() * qb;
    let sv = cross.singular_values();
    let smallest = sv.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smallest.acos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal_systems() {
        let s = solve_symmetric_psd(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(s.solution.as_slice(), &[1.0, 0.0]);
        assert!(!s.degenerate);

        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        let s = solve_symmetric_psd(&k, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert!((s.solution[0] - 0.5).abs() < 1e-15 && (s.solution[1] - 0.25).abs() < 1e-15);
        assert!((s.condition - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_system_gives_minimum_norm_solution() {
        // all-ones matrix: w₁ + w₂ = 1, minimum norm at (½, ½)
        let k = DMatrix::from_element(2, 2, 1.0);
        let s = solve_symmetric_psd(&k, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(s.degenerate);
        assert!((s.solution[0] - 0.5).abs() < 1e-12 && (s.solution[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn moments_use_unbiased_normalisation() {
        let data = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let (mean, cov) = column_moments(&data);
        assert_eq!(mean[0], 2.0);
        assert_eq!(cov[(0, 0)], 1.0);
    }

    #[test]
    fn principal_angle_of_same_span_is_zero() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, -1.0, 0.0]);
        assert!(max_principal_angle(&a, &b) < 1e-7);
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((max_principal_angle(&a, &c) - std::f64::consts::FRAC_PI_2).abs() < 1e-7);
    }
}
