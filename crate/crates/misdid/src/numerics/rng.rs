//! Reproducible random number streams.
//!
//! All simulation code draws from ChaCha12, which produces the same stream for
//! the same seed on every platform. Independent streams (bootstrap replicates,
//! Monte Carlo replicates, auxiliary samples) are derived from a root seed and
//! a stream index through a SplitMix64 finalizer, so replicate r of run s is
//! reproducible in isolation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// The crate-wide generator type.
pub type Stream = ChaCha12Rng;

/// New stream for a raw 64-bit seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Seed for derived stream `index` of root seed `root`.
///
/// Computed as SplitMix64(root XOR (index + 1) * 0x9E3779B97F4A7C15); the odd
/// multiplier spreads consecutive indices across the seed space.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream `index` derived from `root`.
pub fn substream(root: u64, index: u64) -> Stream {
    stream(derive_seed(root, index))
}

/// One standard normal draw.
#[inline]
pub fn draw_normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

/// `n` draws from N(mean, L L') stacked as rows, where `chol_lower` is the
/// lower Cholesky factor of the target covariance.
pub fn mvn_sample(mean: &DVector<f64>, chol_lower: &DMatrix<f64>, rng: &mut Stream, n: usize) -> DMatrix<f64> {
    let d = mean.len();
    assert_eq!(chol_lower.nrows(), d, "cholesky factor must match mean dimension");
    assert_eq!(chol_lower.ncols(), d, "cholesky factor must be square");
    let mut out = DMatrix::zeros(n, d);
    let mut z = vec![0.0_f64; d];
    for row in 0..n {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut acc = mean[i];
            for j in 0..=i {
                acc += chol_lower[(i, j)] * z[j];
            }
            out[(row, i)] = acc;
        }
    }
    out
}
