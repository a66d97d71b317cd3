//! Shared numerical kernels: normal distributions, least squares,
//! Frisch-Waugh residualization, Cholesky factorization, and reproducible
//! multivariate normal sampling.

pub mod bfgs;
pub mod linalg;
pub mod normal;
pub mod rng;

pub use linalg::{cholesky, fw_residualize, ols_solve, sym_inverse};
pub use normal::{bvn_cdf, bvn_pdf, norm_pdf, std_normal_cdf, tallis_moment, RHO_GUARD};
pub use rng::{derive_seed, draw_normal, mvn_sample, stream, substream, Stream};
