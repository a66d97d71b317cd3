//! Quasi-Newton minimizer used by the first-stage likelihood.
//!
//! BFGS on the inverse Hessian with a backtracking Armijo line search. The
//! update is skipped when the curvature condition fails, which keeps the
//! inverse Hessian positive definite.

use nalgebra::{DMatrix, DVector};

pub struct BfgsOptions {
    /// Convergence threshold on the gradient sup-norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { tol: 1e-6, max_iter: 500 }
    }
}

pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut grad = DVector::zeros(dim);
    let mut value = f(&x, &mut grad);
    let mut h_inv = DMatrix::<f64>::identity(dim, dim);
    let mut iterations = 0;
    let mut scaled = false;

    while iterations < opts.max_iter {
        let gnorm = grad.amax();
        if gnorm <= opts.tol {
            return BfgsOutcome { x, value, grad_norm: gnorm, iterations, converged: true };
        }
        iterations += 1;

        let mut dir = -(&h_inv * &grad);
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) || !slope.is_finite() {
            // Restart on a non-descent direction.
            h_inv = DMatrix::identity(dim, dim);
            scaled = false;
            dir = -grad.clone();
            slope = grad.dot(&dir);
        }

        // Backtracking Armijo search.
        let mut step = 1.0_f64;
        let c1 = 1e-4;
        let mut new_grad = DVector::zeros(dim);
        let mut accepted = false;
        let mut new_x = x.clone();
        let mut new_value = value;
        for _ in 0..60 {
            new_x = &x + step * &dir;
            new_value = f(&new_x, &mut new_grad);
            if new_value.is_finite() && new_value <= value + c1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // The line search collapsed; treat the current point as final.
            let gnorm = grad.amax();
            return BfgsOutcome { x, value, grad_norm: gnorm, iterations, converged: gnorm <= opts.tol };
        }

        let s = &new_x - &x;
        let y = &new_grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if !scaled {
                // Shanno-Phua scaling of the initial inverse Hessian.
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h_inv *= sy / yy;
                }
                scaled = true;
            }
            // Standard inverse-Hessian BFGS update.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv = &h_inv + (sy + yhy) * rho * rho * &ss - rho * (&hys + hys.transpose());
        }
        x = new_x;
        grad = new_grad;
        value = new_value;
    }

    let grad_norm = grad.amax();
    BfgsOutcome { x, value, grad_norm, iterations, converged: grad_norm <= opts.tol }
}
