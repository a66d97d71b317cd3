//! Least squares, residualization, and Cholesky kernels.
//!
//! Design matrices here are `nalgebra` dynamic matrices. Least squares goes
//! through a Householder QR factorization rather than the normal equations;
//! the interacted designs used by the estimators can be poorly conditioned.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a QR factor is treated as rank
/// deficient.
const RANK_RTOL: f64 = 1e-10;

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

/// Thin QR of a full-column-rank matrix. Errors name the first column whose
/// pivot falls under the rank tolerance.
fn qr_full_rank(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Domain(format!("{what} has zero dimension")));
    }
    if rows < cols {
        return Err(Error::Estimation(format!(
            "{what} has more columns ({cols}) than rows ({rows})"
        )));
    }
    check_finite(m, what)?;
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = (0..cols).map(|j| r[(j, j)].abs()).fold(0.0_f64, f64::max);
    for j in 0..cols {
        if r[(j, j)].abs() <= RANK_RTOL * scale {
            return Err(Error::Estimation(format!(
                "{what} is rank deficient at column {j}"
            )));
        }
    }
    Ok((qr.q(), r))
}

/// Least-squares solution of `design * beta ~= response` via QR.
///
/// Returns the coefficients and the residual vector. Fails with the offending
/// column index when the design is numerically rank deficient.
pub fn ols_solve(design: &DMatrix<f64>, response: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if design.nrows() != response.len() {
        return Err(Error::Domain(format!(
            "design has {} rows but response has {} entries",
            design.nrows(),
            response.len()
        )));
    }
    let (q, r) = qr_full_rank(design, "design matrix")?;
    let qty = q.transpose() * response;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Estimation("singular triangular factor in least squares".into()))?;
    let resid = response - design * &beta;
    Ok((beta, resid))
}

/// Replace each column of `target` by its residual from a regression on
/// `controls` (the Frisch-Waugh residual-maker applied columnwise).
pub fn fw_residualize(target: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if target.nrows() != controls.nrows() {
        return Err(Error::Domain(format!(
            "target has {} rows but controls has {}",
            target.nrows(),
            controls.nrows()
        )));
    }
    check_finite(target, "target matrix")?;
    let (q, _) = qr_full_rank(controls, "control matrix")?;
    let proj = &q * (q.transpose() * target);
    Ok(target - proj)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Hand-rolled so a non-positive-definite input reports the failing pivot.
pub fn cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(Error::Domain(format!(
            "cholesky needs a square matrix, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    check_finite(cov, "covariance matrix")?;
    let scale = cov.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::Domain(format!(
                    "covariance matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = cov[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Domain(format!(
                "matrix not positive definite: pivot {j} is {d:e}"
            )));
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Inverse of a small symmetric matrix, symmetrized on the way out.
pub fn sym_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Estimation(format!("singular {what}")))?;
    Ok(0.5 * (&inv + inv.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn intercept_only_regression_returns_mean() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 10.0]);
        let (beta, _) = ols_solve(&x, &y).unwrap();
        assert_abs_diff_eq!(beta[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_linear_data_is_interpolated() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.5];
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let y = DVector::from_fn(5, |i, _| 2.0 + 3.0 * xs[i]);
        let (beta, resid) = ols_solve(&x, &y).unwrap();
        assert_abs_diff_eq!(beta[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(beta[1], 3.0, epsilon = 1e-10);
        assert!(resid.amax() < 1e-10);
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        // Deterministic pseudo-random instance.
        let mut s = 123_u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = DMatrix::from_fn(100, 4, |_, j| if j == 0 { 1.0 } else { next() });
        let y = DVector::from_fn(100, |_, _| next());
        let (_, resid) = ols_solve(&x, &y).unwrap();
        let xt_r = x.transpose() * &resid;
        let scale = y.norm();
        assert!(xt_r.amax() / scale < 1e-8);
    }

    #[test]
    fn rank_deficiency_names_the_column() {
        // Column 2 duplicates column 1 scaled.
        let x = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64,
        });
        let y = DVector::zeros(6);
        let err = ols_solve(&x, &y).unwrap_err();
        assert!(err.to_string().contains("column 2"), "{err}");
    }

    #[test]
    fn residualize_leaves_orthogonal_target_unchanged() {
        let controls = DMatrix::from_fn(8, 1, |_, _| 1.0);
        // Mean-zero target is orthogonal to the intercept.
        let t = DVector::from_vec(vec![1.0, -1.0, 2.0, -2.0, 0.5, -0.5, 3.0, -3.0]);
        let target = DMatrix::from_columns(&[t.clone()]);
        let out = fw_residualize(&target, &controls).unwrap();
        assert!((out.column(0) - t).amax() < 1e-12);
    }

    #[test]
    fn residualize_annihilates_linear_combinations() {
        let controls = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let target = DMatrix::from_fn(10, 1, |i, _| 3.0 - 2.0 * i as f64);
        let out = fw_residualize(&target, &controls).unwrap();
        assert!(out.amax() < 1e-10);
    }

    #[test]
    fn residualize_is_idempotent() {
        let mut s = 77_u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let controls = DMatrix::from_fn(40, 3, |_, j| if j == 0 { 1.0 } else { next() });
        let target = DMatrix::from_fn(40, 2, |_, _| next());
        let once = fw_residualize(&target, &controls).unwrap();
        let twice = fw_residualize(&once, &controls).unwrap();
        assert!((&once - &twice).amax() < 1e-10);
    }

    #[test]
    fn cholesky_identity_roundtrip() {
        let id = DMatrix::<f64>::identity(4, 4);
        let l = cholesky(&id).unwrap();
        assert!((id - l).amax() < 1e-15);
    }

    #[test]
    fn cholesky_reconstructs_error_covariance() {
        // The trivariate error covariance with sigma=1, psi_v=0.5, rho=0.3.
        let cov = DMatrix::from_row_slice(3, 3, &[
            1.0, 0.0, 0.5,
            0.0, 1.0, 0.3,
            0.5, 0.3, 1.0,
        ]);
        let l = cholesky(&cov).unwrap();
        let back = &l * l.transpose();
        assert!((back - cov).amax() < 1e-12);
    }

    #[test]
    fn cholesky_reports_failing_pivot_on_degenerate_input() {
        // rho = 1 and psi_v = 1 makes the covariance singular.
        let cov = DMatrix::from_row_slice(3, 3, &[
            1.0, 0.0, 1.0,
            0.0, 1.0, 1.0,
            1.0, 1.0, 1.0,
        ]);
        let err = cholesky(&cov).unwrap_err();
        assert!(err.to_string().contains("pivot"), "{err}");
    }
}
