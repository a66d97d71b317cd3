//! Univariate and bivariate normal kernels.
//!
//! The bivariate CDF is a port of Genz's double-precision BVND routine
//! (Drezner & Wesolowsky quadrature of the correlation derivative, with a
//! separate expansion for |rho| near 1). Arguments are sorted on entry so the
//! computed value is exactly symmetric in (a, b).

use crate::error::{Error, Result};

/// Guard band keeping the correlation away from +-1; the truncated-moment
/// formula divides by sqrt(1 - rho^2).
pub const RHO_GUARD: f64 = 1e-12;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;
const FRAC_1_2PI: f64 = 0.159_154_943_091_895_35;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF via the complementary error function.
///
/// Absolute error is a few ulps; saturates to 0/1 in the far tails.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard bivariate normal density with correlation `rho`.
#[inline]
pub fn bvn_pdf(a: f64, b: f64, rho: f64) -> f64 {
    let omr2 = (1.0 - rho) * (1.0 + rho);
    let q = (a * a - 2.0 * rho * a * b + b * b) / omr2;
    (-0.5 * q).exp() * FRAC_1_2PI / omr2.sqrt()
}

fn check_rho(rho: f64) -> Result<()> {
    if !rho.is_finite() || rho.abs() > 1.0 - RHO_GUARD {
        return Err(Error::Domain(format!(
            "correlation {rho} outside [-1+{RHO_GUARD:e}, 1-{RHO_GUARD:e}]"
        )));
    }
    Ok(())
}

/// P(N1 <= a, N2 <= b) for standard bivariate normal with correlation `rho`.
///
/// Requires |rho| <= 1 - 1e-12. Absolute accuracy is well below 1e-10; the
/// result satisfies the Frechet bounds and is exactly symmetric in (a, b).
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("non-finite bvn_cdf argument ({a}, {b})")));
    }
    // Sort the limits so the algorithm sees a canonical (lo, hi) pair.
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    // P(X <= lo, Y <= hi) = P(-X >= -lo, -Y >= -hi) = bvnd(-lo, -hi, rho).
    Ok(bvnd(-lo, -hi, rho).clamp(0.0, 1.0))
}

// Gauss-Legendre points and weights (w, x) used by the BVND quadratures.
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197_0),
];
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475_0),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305_0),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515_0),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

fn quadrature(rho_abs: f64) -> &'static [(f64, f64)] {
    if rho_abs < 0.3 {
        &GL6
    } else if rho_abs < 0.75 {
        &GL12
    } else {
        &GL20
    }
}

/// Upper-orthant probability P(X > h, Y > k) for correlation `r`.
fn bvnd(h: f64, k: f64, r: f64) -> f64 {
    if r < -0.925 {
        // Reduce strongly negative correlations to the positive branch:
        // P(X > h, Y > k; r) = P(Y > k) - P(-X > -h, Y > k; -r).
        return std_normal_cdf(-k) - bvnd(-h, k, -r);
    }
    let hk = h * k;
    let mut bvn = 0.0;
    if r.abs() <= 0.925 {
        if r != 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = 0.5 * libm::asin(r);
            for &(w, x) in quadrature(r.abs()) {
                for sgn in [-1.0, 1.0] {
                    let sn = libm::sin(asr * (sgn * x + 1.0));
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr * FRAC_1_2PI;
        }
        bvn + std_normal_cdf(-h) * std_normal_cdf(-k)
    } else {
        // r in (0.925, 1): expansion about the singularity at r = 1.
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -0.5 * (b_s / a_s + hk);
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                + c * d * a_s * a_s / 5.0);
        }
        if -hk < 100.0 {
            let b = b_s.sqrt();
            bvn -= (-0.5 * hk).exp()
                * SQRT_2PI
                * std_normal_cdf(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a *= 0.5;
        for &(w, x) in GL20.iter() {
            for sgn in [-1.0, 1.0] {
                let xi = a * (sgn * x + 1.0);
                let xs = xi * xi;
                let rs = (1.0 - xs).sqrt();
                let asr = -0.5 * (b_s / xs + hk);
                if asr > -100.0 {
                    bvn += a * w * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        -bvn * FRAC_1_2PI + std_normal_cdf(-h.max(k))
    }
}

/// Truncated first moment E[dxi * 1{U >= -rg, V >= -za}] under the trivariate
/// law where (U, V) are standard normal with correlation `rho`, dxi has
/// standard deviation `sigma`, corr(dxi, V) = `psi_v`, and corr(dxi, U) = 0.
///
/// Closed form: sigma * psi_v * phi(-za) * Phi((rg - rho*za) / sqrt(1 - rho^2)).
pub fn tallis_moment(rg: f64, za: f64, rho: f64, sigma: f64, psi_v: f64) -> Result<f64> {
    check_rho(rho)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")));
    }
    if !rg.is_finite() || !za.is_finite() || !psi_v.is_finite() {
        return Err(Error::Domain("non-finite tallis_moment argument".into()));
    }
    let omr = (1.0 - rho * rho).sqrt();
    Ok(sigma * psi_v * norm_pdf(-za) * std_normal_cdf((rg - rho * za) / omr))
}
