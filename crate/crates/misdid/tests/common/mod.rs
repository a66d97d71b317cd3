//! Shared oracle machinery for the integration tests.
//!
//! Everything here recomputes target quantities through routes that are
//! independent of the library implementation: adaptive quadrature of the
//! normal density for CDFs, plain Monte Carlo with a hand-rolled Cholesky for
//! truncated moments, compensated-summation normal equations for least
//! squares.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Adaptive Simpson quadrature with an absolute tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = simpson(a, fa, b, fb, fm);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 48)
}

/// Knot spacing for the cached CDF anchors.
const PHI_STEP: f64 = 0.25;
const PHI_HALF_SPAN: i32 = 38; // +-9.5 in steps of 0.25

/// Anchor values of the CDF on a grid, integrated outward from zero once.
fn phi_anchors() -> &'static Vec<f64> {
    use std::sync::OnceLock;
    static ANCHORS: OnceLock<Vec<f64>> = OnceLock::new();
    ANCHORS.get_or_init(|| {
        let m = PHI_HALF_SPAN as usize;
        let mut table = vec![0.0_f64; 2 * m + 1];
        table[m] = 0.5;
        for i in 1..=m {
            let lo = (i as f64 - 1.0) * PHI_STEP;
            let seg = adaptive_simpson(&density, lo, lo + PHI_STEP, 1e-16);
            table[m + i] = table[m + i - 1] + seg;
            table[m - i] = table[m - i + 1] - {
                let hi = -(i as f64 - 1.0) * PHI_STEP;
                adaptive_simpson(&density, hi - PHI_STEP, hi, 1e-16)
            };
        }
        table
    })
}

/// Standard normal CDF by quadrature of the density: nearest cached anchor
/// plus a short-segment integral.
pub fn oracle_phi(x: f64) -> f64 {
    if x <= -(PHI_HALF_SPAN as f64) * PHI_STEP {
        return 0.0;
    }
    if x >= PHI_HALF_SPAN as f64 * PHI_STEP {
        return 1.0;
    }
    let idx = (x / PHI_STEP).floor() as i32;
    let knot = idx as f64 * PHI_STEP;
    let base = phi_anchors()[(idx + PHI_HALF_SPAN) as usize];
    (base + adaptive_simpson(&density, knot, x, 1e-16)).clamp(0.0, 1.0)
}

/// Bivariate normal CDF by iterated quadrature of the bivariate density:
/// the inner variable integrates to a conditional CDF, itself evaluated by
/// quadrature.
pub fn oracle_bvn(a: f64, b: f64, rho: f64) -> f64 {
    let omr = (1.0 - rho * rho).sqrt();
    let f = move |x: f64| density(x) * oracle_phi((b - rho * x) / omr);
    let lo = -9.5_f64;
    if a <= lo {
        return 0.0;
    }
    adaptive_simpson(&f, lo, a.min(9.5), 1e-12)
}

/// Monte Carlo estimate of E[dxi 1{U >= -rg, V >= -za}] under the trivariate
/// law used by the generative model, with a hand-rolled Cholesky of the
/// 3x3 covariance. Returns (estimate, standard error).
pub fn mc_truncated_moment(
    rg: f64,
    za: f64,
    rho: f64,
    sigma: f64,
    psi_v: f64,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    // Sigma rows: (dxi, U, V). Lower Cholesky computed by hand:
    // l11 = sigma; U independent of dxi so l21 = 0, l22 = 1;
    // V: l31 = psi_v, l32 = rho, l33 = sqrt(1 - psi_v^2 - rho^2).
    let l11 = sigma;
    let l31 = psi_v;
    let l32 = rho;
    let l33 = (1.0 - psi_v * psi_v - rho * rho).sqrt();
    assert!(l33.is_finite() && l33 > 0.0, "degenerate covariance in the oracle");
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 {
        // Polar Marsaglia, independent of the library's sampler.
        loop {
            let u: f64 = 2.0 * rng.random::<f64>() - 1.0;
            let v: f64 = 2.0 * rng.random::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    };
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..draws {
        let z1 = normal();
        let z2 = normal();
        let z3 = normal();
        let dxi = l11 * z1;
        let u = z2;
        let v = l31 * z1 + l32 * z2 + l33 * z3;
        let val = if u >= -rg && v >= -za { dxi } else { 0.0 };
        sum += val;
        sum2 += val * val;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean) / n;
    (mean, var.max(0.0).sqrt())
}

/// Least squares through the normal equations with Neumaier-compensated
/// accumulation and Gaussian elimination with partial pivoting.
pub fn normal_equations_solve(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let k = x[0].len();
    let comp_sum = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        let mut s = 0.0_f64;
        let mut c = 0.0_f64;
        for v in it {
            let t = s + v;
            if s.abs() >= v.abs() {
                c += (s - t) + v;
            } else {
                c += (v - t) + s;
            }
            s = t;
        }
        s + c
    };
    let mut a = vec![vec![0.0_f64; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = comp_sum(&mut (0..n).map(|r| x[r][i] * x[r][j]));
        }
        a[i][k] = comp_sum(&mut (0..n).map(|r| x[r][i] * y[r]));
    }
    // Gaussian elimination with partial pivoting on the augmented system.
    for col in 0..k {
        let piv = (col..k).max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for j in col..=k {
            a[col][j] /= d;
        }
        for row in 0..k {
            if row != col {
                let m = a[row][col];
                for j in col..=k {
                    a[row][j] -= m * a[col][j];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k]).collect()
}
