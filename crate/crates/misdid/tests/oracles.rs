//! Oracle tests: every numerical kernel is checked against an independent
//! route (quadrature of the density, Monte Carlo integration, compensated
//! normal equations, finite differences).

mod common;

use approx::assert_abs_diff_eq;
use misdid::bias_lab::DgpConfig;
use misdid::data::demean;
use misdid::numerics::{bvn_cdf, ols_solve, std_normal_cdf, tallis_moment};
use misdid::pop::{pop_loglik, with_intercept};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn normal_cdf_matches_quadrature_oracle() {
    // The 97.5% quantile, frozen from the quadrature oracle.
    assert_abs_diff_eq!(common::oracle_phi(1.959_963_984_540_054), 0.975, epsilon = 1e-13);
    assert_abs_diff_eq!(std_normal_cdf(1.959_963_984_540_054), 0.975, epsilon = 1e-14);
    for i in -40..=40 {
        let x = i as f64 * 0.2;
        assert_abs_diff_eq!(std_normal_cdf(x), common::oracle_phi(x), epsilon = 1e-14);
    }
}

#[test]
fn bvn_cdf_matches_quadrature_oracle_at_spot_points() {
    // Frozen oracle value for the asymmetric spot point.
    let oracle = common::oracle_bvn(0.5, -0.3, 0.7);
    assert_abs_diff_eq!(oracle, 0.356_783_634_797_435_9, epsilon = 1e-11);
    assert_abs_diff_eq!(bvn_cdf(0.5, -0.3, 0.7).unwrap(), oracle, epsilon = 1e-12);
    for &(a, b, r) in &[
        (0.0, 0.0, 0.5),
        (1.5, -2.0, -0.8),
        (-0.7, 0.3, 0.95),
        (2.5, 2.0, -0.99),
        (-1.0, -1.0, 0.3),
    ] {
        assert_abs_diff_eq!(bvn_cdf(a, b, r).unwrap(), common::oracle_bvn(a, b, r), epsilon = 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Frechet bounds hold everywhere.
    #[test]
    fn bvn_respects_frechet_bounds(a in -4.0..4.0f64, b in -4.0..4.0f64, r in -0.999..0.999f64) {
        let v = bvn_cdf(a, b, r).unwrap();
        let pa = std_normal_cdf(a);
        let pb = std_normal_cdf(b);
        let lower = (pa + pb - 1.0).max(0.0);
        let upper = pa.min(pb);
        prop_assert!(v >= lower - 1e-12, "v = {v}, lower = {lower}");
        prop_assert!(v <= upper + 1e-12, "v = {v}, upper = {upper}");
    }

    /// Computed symmetry in the two limits is exact.
    #[test]
    fn bvn_is_exactly_symmetric(a in -4.0..4.0f64, b in -4.0..4.0f64, r in -0.999..0.999f64) {
        let x = bvn_cdf(a, b, r).unwrap();
        let y = bvn_cdf(b, a, r).unwrap();
        prop_assert_eq!(x.to_bits(), y.to_bits());
    }

    /// Independence factorization at rho = 0.
    #[test]
    fn bvn_factorises_at_zero_rho(a in -4.0..4.0f64, b in -4.0..4.0f64) {
        let v = bvn_cdf(a, b, 0.0).unwrap();
        prop_assert!((v - std_normal_cdf(a) * std_normal_cdf(b)).abs() < 1e-12);
    }
}

#[test]
fn bvn_is_monotone_in_each_argument() {
    let grid: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
    let rhos = [-0.95, -0.5, 0.0, 0.5, 0.95];
    for &r in &rhos {
        for &b in &grid {
            let mut prev = -1.0;
            for &a in &grid {
                let v = bvn_cdf(a, b, r).unwrap();
                assert!(v >= prev - 1e-13, "not monotone in a at ({a}, {b}, {r})");
                prev = v;
            }
        }
    }
    // Monotone in rho as well.
    for &a in &grid {
        for &b in &grid {
            let mut prev = -1.0;
            for i in -9..=9 {
                let r = i as f64 * 0.11;
                let v = bvn_cdf(a, b, r).unwrap();
                assert!(v >= prev - 1e-13, "not monotone in rho at ({a}, {b}, {r})");
                prev = v;
            }
        }
    }
}

#[test]
fn tallis_moment_matches_monte_carlo() {
    let (rg, za, rho, sigma, psi_v) = (0.3, 0.5, 0.2, 1.0, 0.4);
    let closed = tallis_moment(rg, za, rho, sigma, psi_v).unwrap();
    let (mc, se) = common::mc_truncated_moment(rg, za, rho, sigma, psi_v, 10_000_000, 99);
    assert!(
        (closed - mc).abs() <= 3.0 * se,
        "closed {closed} vs mc {mc} (se {se})"
    );
}

#[test]
fn ols_matches_normal_equations_oracle() {
    // Random 100 x 4 system with a deterministic generator.
    let mut s = 2024_u64;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let n = 100;
    let k = 4;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![1.0];
        for _ in 1..k {
            row.push(3.0 * next());
        }
        y.push(2.0 * next());
        rows.push(row);
    }
    let design = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let response = DVector::from_fn(n, |i, _| y[i]);
    let (beta, _) = ols_solve(&design, &response).unwrap();
    let oracle = common::normal_equations_solve(&rows, &y);
    for j in 0..k {
        assert_abs_diff_eq!(beta[j], oracle[j], epsilon = 1e-10);
    }
}

#[test]
fn pop_loglik_matches_direct_sum_with_oracle_probabilities() {
    // 40 observations; the likelihood must equal a hand-rolled sum with
    // bivariate probabilities from the quadrature oracle.
    let mut s = 7_u64;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let n = 40;
    let gamma = DVector::from_vec(vec![0.2, 0.7]);
    let alpha = DVector::from_vec(vec![0.4, -0.6]);
    let rho = 0.35;
    let mut r = DMatrix::zeros(n, 2);
    let mut z = DMatrix::zeros(n, 2);
    let mut d = DVector::zeros(n);
    for i in 0..n {
        r[(i, 0)] = 1.0;
        r[(i, 1)] = 2.0 * next();
        z[(i, 0)] = 1.0;
        z[(i, 1)] = 2.0 * next();
        d[i] = (next() > 0.0) as i32 as f64;
    }
    let ll = pop_loglik(&gamma, &alpha, rho, &d, &r, &z).unwrap();
    let mut direct = 0.0;
    for i in 0..n {
        let a = gamma[0] + gamma[1] * r[(i, 1)];
        let b = alpha[0] + alpha[1] * z[(i, 1)];
        let f = common::oracle_bvn(a, b, rho).clamp(1e-12, 1.0 - 1e-12);
        direct += if d[i] == 1.0 { f.ln() } else { (1.0 - f).ln() };
    }
    assert_abs_diff_eq!(ll, direct, epsilon = 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The analytic score matches central finite differences of the
    /// log-likelihood over random parameters and data.
    #[test]
    fn pop_score_matches_finite_differences(
        seed in 0u64..1000,
        g1 in -1.0..1.0f64,
        a1 in -1.0..1.0f64,
        rho in -0.8..0.8f64,
    ) {
        use misdid::pop::pop_score;
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let n = 50;
        let mut r = DMatrix::zeros(n, 2);
        let mut z = DMatrix::zeros(n, 2);
        let mut d = DVector::zeros(n);
        for i in 0..n {
            r[(i, 0)] = 1.0;
            r[(i, 1)] = 2.0 * next();
            z[(i, 0)] = 1.0;
            z[(i, 1)] = 2.0 * next();
            d[i] = (next() > -0.1) as i32 as f64;
        }
        let gamma = DVector::from_vec(vec![0.1, g1]);
        let alpha = DVector::from_vec(vec![0.2, a1]);
        let analytic = pop_score(&gamma, &alpha, rho, &d, &r, &z).unwrap();
        // Central differences in (gamma, alpha, atanh rho) coordinates.
        let h = 1e-5;
        let eval = |gg: &DVector<f64>, aa: &DVector<f64>, w: f64| {
            pop_loglik(gg, aa, w.tanh(), &d, &r, &z).unwrap()
        };
        let w0 = rho.atanh();
        for j in 0..5 {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            let mut ap = alpha.clone();
            let mut am = alpha.clone();
            let mut wp = w0;
            let mut wm = w0;
            match j {
                0 | 1 => {
                    gp[j] += h;
                    gm[j] -= h;
                }
                2 | 3 => {
                    ap[j - 2] += h;
                    am[j - 2] -= h;
                }
                _ => {
                    wp += h;
                    wm -= h;
                }
            }
            let fd = (eval(&gp, &ap, wp) - eval(&gm, &am, wm)) / (2.0 * h);
            let denom = 1.0_f64.max(fd.abs());
            prop_assert!(
                (analytic[j] - fd).abs() / denom < 1e-5,
                "component {j}: analytic {} vs fd {fd}",
                analytic[j]
            );
        }
    }
}

#[test]
fn predicted_weight_demeaning_matches_population_target() {
    // Weighted centering with Phi(R gamma) weights estimates E[X | D* = 1].
    let cfg = DgpConfig::benchmark();
    let n = 200_000;
    let ds = misdid::bias_lab::simulate_panel(&cfg, n, 313).unwrap();
    let fd = misdid::data::first_difference(&ds).unwrap();
    let r = with_intercept(&fd.x);
    let gamma = DVector::from_vec(cfg.gamma.clone());
    let idx = &r * &gamma;
    let weights = DVector::from_fn(n, |i, _| std_normal_cdf(idx[i]));
    let dm = demean(&fd.x, &weights).unwrap();
    // Closed form for k = 1 (see the centering unit test).
    let s = (1.0 + cfg.gamma[1] * cfg.gamma[1]).sqrt();
    let m = cfg.gamma[0] / s;
    let target = (cfg.gamma[1] / s) * (-0.5 * m * m).exp() / (2.5066282746310005 * std_normal_cdf(m));
    // Three Monte Carlo standard errors of a weighted mean at this n.
    let tol = 3.0 * 1.3 / (n as f64 * 0.56).sqrt();
    assert!(
        (dm.centering_vector[0] - target).abs() < tol,
        "centering {} vs population {target}",
        dm.centering_vector[0]
    );
}
