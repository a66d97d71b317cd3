//! Ground-truth machinery: the trivariate-normal data-generating process,
//! exact decompositions of the DID estimand for discrete joint laws, the
//! closed-form bias of the simple (no-covariate) design, large-sample plug-in
//! formulas for the asymptotic bias of the naive estimators, and a Monte
//! Carlo harness.
//!
//! The generative model draws covariates X and excluded instruments Z as
//! independent standard normals, latent errors (dxi, U, V) from a trivariate
//! normal with unit variances on (U, V), corr(U, V) = rho, corr(dxi, V) =
//! psi_v, corr(dxi, U) = 0, and sets
//!
//! - true treatment `D* = 1{gamma . (1, X) + U >= 0}`,
//! - recording    `S  = 1{alpha . (1, Xshared, Z) + V >= 0}`,
//! - observed     `D  = D* . S`.
//!
//! Outcome changes follow `dY = (1, Xo) delta + D* (1, Xo) theta + dxi` with
//! `Xo = X - E[X | D* = 1]`; the centering constant is a population object,
//! approximated once per configuration by a large auxiliary simulation with a
//! fixed derived seed so every consumer sees the same value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Layout, Roles};
use crate::error::{Error, Result};
use crate::estimators::{self, DidEstimate, EstimatorOptions, Method, SeMode};
use crate::numerics::linalg::{cholesky, sym_inverse};
use crate::numerics::normal::{bvn_cdf, norm_pdf, std_normal_cdf, tallis_moment};
use crate::numerics::rng::{derive_seed, draw_normal, stream, Stream};
use crate::pop::PopSpec;

/// Auxiliary stream id for the centering constant.
const CENTERING_STREAM: u64 = 0xC3A5_C85C_97CB_3127;
/// Auxiliary stream id for plug-in moment samples.
const MOMENT_STREAM: u64 = 0x9D2C_5680_A39B_21D4;
/// Draws used for the centering constant.
const CENTERING_DRAWS: usize = 1_000_000;

/// Full generative parameterization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    /// Covariate count.
    pub k: usize,
    /// Baseline-trend coefficients over (1, Xo), length k + 1.
    pub delta: Vec<f64>,
    /// Treatment-effect coefficients over (1, Xo), ATT lead first, length k + 1.
    pub theta: Vec<f64>,
    /// Baseline-level coefficients (used by both layouts), length k + 1.
    pub eta1: Vec<f64>,
    /// Baseline treated-level coefficients, length k + 1.
    pub eta2: Vec<f64>,
    /// True-treatment index coefficients over (1, X), length k + 1.
    pub gamma: Vec<f64>,
    /// Recording index coefficients over (1, shared X, excluded Z).
    pub alpha: Vec<f64>,
    /// Number of excluded instruments (trailing entries of alpha).
    #[serde(default = "default_one")]
    pub n_instruments: usize,
    /// Outcome error standard deviation.
    pub sigma: f64,
    /// corr(outcome error, V).
    pub psi_v: f64,
    /// corr(U, V).
    pub rho: f64,
    /// P(T = 1) for repeated cross-sections.
    #[serde(default = "default_half")]
    pub lambda: f64,
}

fn default_one() -> usize {
    1
}
fn default_half() -> f64 {
    0.5
}

impl DgpConfig {
    /// The benchmark configuration used across tests: one covariate, strong
    /// instrument, correlated recording errors, and enough misrecording that
    /// the naive estimators are visibly biased.
    pub fn benchmark() -> DgpConfig {
        DgpConfig {
            k: 1,
            delta: vec![0.5, 0.3],
            theta: vec![1.0, 0.5],
            eta1: vec![1.0, 0.5],
            eta2: vec![0.5, 0.2],
            gamma: vec![0.2, 0.8],
            alpha: vec![0.3, 0.9],
            n_instruments: 1,
            sigma: 1.0,
            psi_v: 0.4,
            rho: -0.3,
            lambda: 0.5,
        }
    }

    /// The benchmark with exogenous errors, homogeneous effects, and no
    /// misrecording (the recording index intercept makes S = 1 almost
    /// surely).
    pub fn clean() -> DgpConfig {
        DgpConfig {
            theta: vec![1.0, 0.0],
            alpha: vec![8.0, 0.9],
            psi_v: 0.0,
            ..DgpConfig::benchmark()
        }
    }

    /// A no-covariate variant of the benchmark for the simple-design bias.
    pub fn benchmark_k0() -> DgpConfig {
        DgpConfig {
            k: 0,
            delta: vec![0.5],
            theta: vec![1.0],
            eta1: vec![1.0],
            eta2: vec![0.5],
            gamma: vec![0.2],
            alpha: vec![0.3, 0.9],
            n_instruments: 1,
            sigma: 1.0,
            psi_v: 0.4,
            rho: -0.3,
            lambda: 0.5,
        }
    }

    /// The generand ATT.
    pub fn tau(&self) -> f64 {
        self.theta[0]
    }

    /// Leading covariates also entering the recording index.
    pub fn n_shared(&self) -> usize {
        self.alpha.len() - 1 - self.n_instruments
    }

    /// Trivariate error covariance.
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let s = self.sigma;
        DMatrix::from_row_slice(3, 3, &[
            s * s, 0.0, self.psi_v * s,
            0.0, 1.0, self.rho,
            self.psi_v * s, self.rho, 1.0,
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let kp1 = self.k + 1;
        for (name, v) in [
            ("delta", &self.delta),
            ("theta", &self.theta),
            ("eta1", &self.eta1),
            ("eta2", &self.eta2),
            ("gamma", &self.gamma),
        ] {
            if v.len() != kp1 {
                return Err(Error::Ingestion(format!(
                    "{name} has {} entries, expected {kp1}",
                    v.len()
                )));
            }
        }
        if self.n_instruments == 0 {
            return Err(Error::Identification("the generative model needs at least one excluded instrument".into()));
        }
        if self.alpha.len() < 1 + self.n_instruments {
            return Err(Error::Ingestion(format!(
                "alpha has {} entries but needs at least {}",
                self.alpha.len(),
                1 + self.n_instruments
            )));
        }
        if self.n_shared() > self.k {
            return Err(Error::Ingestion("alpha implies more shared covariates than k".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Ingestion(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Ingestion(format!("lambda must lie in (0,1), got {}", self.lambda)));
        }
        cholesky(&self.sigma_matrix())
            .map_err(|e| Error::Domain(format!("error covariance is not positive definite: {e}")))?;
        Ok(())
    }

    /// Parse a TOML configuration file.
    pub fn from_path(path: &std::path::Path) -> Result<DgpConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        let cfg: DgpConfig =
            toml::from_str(&text).map_err(|e| Error::Ingestion(format!("dgp file {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Population centering constant E[X | D* = 1], approximated by a fixed
    /// auxiliary simulation so the simulators and the plug-in formulas agree.
    pub fn centering(&self) -> Result<DVector<f64>> {
        self.validate()?;
        let mut rng = stream(derive_seed(CENTERING_STREAM, 0));
        let mut sums = vec![0.0_f64; self.k];
        let mut count = 0usize;
        let mut x = vec![0.0_f64; self.k];
        for _ in 0..CENTERING_DRAWS {
            let mut idx = self.gamma[0];
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = draw_normal(&mut rng);
                idx += self.gamma[j + 1] * *xj;
            }
            let u = draw_normal(&mut rng);
            if idx + u >= 0.0 {
                count += 1;
                for (s, xj) in sums.iter_mut().zip(&x) {
                    *s += xj;
                }
            }
        }
        if count == 0 {
            return Err(Error::Domain("true treatment has probability zero under this configuration".into()));
        }
        Ok(DVector::from_fn(self.k, |j, _| sums[j] / count as f64))
    }

    /// First-stage specification matching the simulated column names.
    pub fn pop_spec(&self) -> PopSpec {
        PopSpec {
            covariates: (1..=self.k).map(|j| format!("x{j}")).collect(),
            shared_in_z: (1..=self.n_shared()).map(|j| format!("x{j}")).collect(),
            instruments: (1..=self.n_instruments).map(|j| format!("z{j}")).collect(),
        }
    }

    fn roles(&self, panel: bool) -> Roles {
        Roles {
            outcome: "y".into(),
            time: "t".into(),
            id: if panel { Some("unit".into()) } else { None },
            treatment: "d".into(),
            covariates: (1..=self.k).map(|j| format!("x{j}")).collect(),
            instruments: (1..=self.n_instruments).map(|j| format!("z{j}")).collect(),
            true_treatment: Some("dstar".into()),
        }
    }
}

/// One unit's latent draw.
struct UnitDraw {
    x: Vec<f64>,
    z: Vec<f64>,
    dxi: f64,
    u: f64,
    v: f64,
    dstar: bool,
    s: bool,
}

struct Generator<'a> {
    cfg: &'a DgpConfig,
    chol: DMatrix<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a DgpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Generator { cfg, chol: cholesky(&cfg.sigma_matrix())? })
    }

    fn draw(&self, rng: &mut Stream) -> UnitDraw {
        let cfg = self.cfg;
        let mut x = vec![0.0; cfg.k];
        for xj in x.iter_mut() {
            *xj = draw_normal(rng);
        }
        let mut z = vec![0.0; cfg.n_instruments];
        for zj in z.iter_mut() {
            *zj = draw_normal(rng);
        }
        let (z1, z2, z3) = (draw_normal(rng), draw_normal(rng), draw_normal(rng));
        let dxi = self.chol[(0, 0)] * z1;
        let u = self.chol[(1, 0)] * z1 + self.chol[(1, 1)] * z2;
        let v = self.chol[(2, 0)] * z1 + self.chol[(2, 1)] * z2 + self.chol[(2, 2)] * z3;
        let mut gidx = cfg.gamma[0];
        for j in 0..cfg.k {
            gidx += cfg.gamma[j + 1] * x[j];
        }
        let mut aidx = cfg.alpha[0];
        let shared = cfg.n_shared();
        for j in 0..shared {
            aidx += cfg.alpha[1 + j] * x[j];
        }
        for j in 0..cfg.n_instruments {
            aidx += cfg.alpha[1 + shared + j] * z[j];
        }
        let dstar = gidx + u >= 0.0;
        let s = aidx + v >= 0.0;
        UnitDraw { x, z, dxi, u, v, dstar, s }
    }

    fn effect_index(&self, coef: &[f64], xo: &[f64]) -> f64 {
        let mut acc = coef[0];
        for j in 0..xo.len() {
            acc += coef[j + 1] * xo[j];
        }
        acc
    }
}

fn build_columns(cfg: &DgpConfig, panel: bool, cap: usize) -> Vec<(String, Vec<f64>)> {
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    if panel {
        cols.push(("unit".into(), Vec::with_capacity(cap)));
    }
    cols.push(("t".into(), Vec::with_capacity(cap)));
    cols.push(("y".into(), Vec::with_capacity(cap)));
    cols.push(("d".into(), Vec::with_capacity(cap)));
    cols.push(("dstar".into(), Vec::with_capacity(cap)));
    for j in 1..=cfg.k {
        cols.push((format!("x{j}"), Vec::with_capacity(cap)));
    }
    for j in 1..=cfg.n_instruments {
        cols.push((format!("z{j}"), Vec::with_capacity(cap)));
    }
    cols
}

/// Simulate a balanced two-period panel with the true treatment recorded in
/// the `dstar` column. Deterministic in (configuration, n, seed).
pub fn simulate_panel(cfg: &DgpConfig, n: usize, seed: u64) -> Result<Dataset> {
    simulate_panel_with(cfg, &cfg.centering()?, n, seed).map(|(ds, _)| ds)
}

/// Panel simulation with the centering constant precomputed (the Monte Carlo
/// harness reuses one constant across replicates). Also returns the latent
/// errors (dxi, u, v) per unit for simulator-faithfulness checks.
pub fn simulate_panel_with(
    cfg: &DgpConfig,
    centering: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Vec<[f64; 3]>)> {
    let generator = Generator::new(cfg)?;
    let mut rng = stream(seed);
    let mut cols = build_columns(cfg, true, 2 * n);
    let mut latents = Vec::with_capacity(n);
    let mut xo = vec![0.0; cfg.k];
    for i in 0..n {
        let u = generator.draw(&mut rng);
        let xi0 = cfg.sigma * draw_normal(&mut rng);
        for j in 0..cfg.k {
            xo[j] = u.x[j] - centering[j];
        }
        let dstar = u.dstar as i32 as f64;
        let d = (u.dstar && u.s) as i32 as f64;
        let dy = generator.effect_index(&cfg.delta, &xo)
            + dstar * generator.effect_index(&cfg.theta, &xo)
            + u.dxi;
        let y0 = generator.effect_index(&cfg.eta1, &xo)
            + dstar * generator.effect_index(&cfg.eta2, &xo)
            + xi0;
        let y1 = y0 + dy;
        latents.push([u.dxi, u.u, u.v]);
        for (t, y) in [(0.0, y0), (1.0, y1)] {
            let mut c = 0;
            cols[c].1.push(i as f64);
            c += 1;
            cols[c].1.push(t);
            c += 1;
            cols[c].1.push(y);
            c += 1;
            cols[c].1.push(d);
            c += 1;
            cols[c].1.push(dstar);
            c += 1;
            for j in 0..cfg.k {
                cols[c + j].1.push(u.x[j]);
            }
            c += cfg.k;
            for j in 0..cfg.n_instruments {
                cols[c + j].1.push(u.z[j]);
            }
        }
    }
    let ds = Dataset::new(cols, cfg.roles(true))?;
    Ok((ds, latents))
}

/// Simulate repeated cross-sections: each row is its own unit, observed in
/// period T ~ Bernoulli(lambda), with the pooled error playing the role of
/// the outcome error in the trivariate law.
pub fn simulate_rcs(cfg: &DgpConfig, n: usize, seed: u64) -> Result<Dataset> {
    simulate_rcs_with(cfg, &cfg.centering()?, n, seed)
}

pub fn simulate_rcs_with(cfg: &DgpConfig, centering: &DVector<f64>, n: usize, seed: u64) -> Result<Dataset> {
    let generator = Generator::new(cfg)?;
    let mut rng = stream(seed);
    let mut cols = build_columns(cfg, false, n);
    let mut xo = vec![0.0; cfg.k];
    for _ in 0..n {
        let t = (rand::Rng::random::<f64>(&mut rng) < cfg.lambda) as i32 as f64;
        let u = generator.draw(&mut rng);
        for j in 0..cfg.k {
            xo[j] = u.x[j] - centering[j];
        }
        let dstar = u.dstar as i32 as f64;
        let d = (u.dstar && u.s) as i32 as f64;
        let y = generator.effect_index(&cfg.eta1, &xo)
            + dstar * generator.effect_index(&cfg.eta2, &xo)
            + t * (generator.effect_index(&cfg.delta, &xo)
                + dstar * generator.effect_index(&cfg.theta, &xo))
            + u.dxi;
        let mut c = 0;
        cols[c].1.push(t);
        c += 1;
        cols[c].1.push(y);
        c += 1;
        cols[c].1.push(d);
        c += 1;
        cols[c].1.push(dstar);
        c += 1;
        for j in 0..cfg.k {
            cols[c + j].1.push(u.x[j]);
        }
        c += cfg.k;
        for j in 0..cfg.n_instruments {
            cols[c + j].1.push(u.z[j]);
        }
    }
    Dataset::new(cols, cfg.roles(false))
}

// ---------------------------------------------------------------------------
// Exact decomposition for discrete joint laws
// ---------------------------------------------------------------------------

/// A joint law over (D, D*) with attached conditional means of the treatment
/// effect and of the untreated gain. Indexing is `[d][dstar]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteJoint {
    /// Cell probabilities, sum to one.
    pub prob: [[f64; 2]; 2],
    /// E[Y1(1) - Y1(0) | D = d, D* = dstar].
    pub effect_mean: [[f64; 2]; 2],
    /// E[G1(0) | D = d, D* = dstar].
    pub trend_mean: [[f64; 2]; 2],
}

impl DiscreteJoint {
    /// A joint with effect and trend means depending on D* only
    /// (non-differential misclassification in both senses).
    pub fn non_differential(prob: [[f64; 2]; 2], effect: [f64; 2], trend: [f64; 2]) -> DiscreteJoint {
        DiscreteJoint {
            prob,
            effect_mean: [[effect[0], effect[1]], [effect[0], effect[1]]],
            trend_mean: [[trend[0], trend[1]], [trend[0], trend[1]]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for row in &self.prob {
            for &p in row {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::Domain(format!("negative or non-finite cell probability {p}")));
                }
                total += p;
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("cell probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    fn p_d(&self, d: usize) -> f64 {
        self.prob[d][0] + self.prob[d][1]
    }

    fn p_dstar(&self, dstar: usize) -> f64 {
        self.prob[0][dstar] + self.prob[1][dstar]
    }
}

/// The exact decomposition of the DID estimand for a known joint law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// E[Y1(1) - Y1(0) | D = 1]: the gain of the recorded-treated group.
    pub effect_recorded_treated: f64,
    /// Trend gap across recorded groups, E[G1(0)|D=1] - E[G1(0)|D=0].
    pub trend_gap_recorded: f64,
    /// The decomposed DID estimand (sum of the two pieces above).
    pub did_recorded: f64,
    pub att: f64,
    pub atu: f64,
    /// P(D* = 1 | D = 1).
    pub q1: f64,
    /// P(D* = 0 | D = 0).
    pub q0: f64,
    /// Trend gap across true groups, E[G1(0)|D*=1] - E[G1(0)|D*=0].
    pub trend_gap_true: f64,
}

/// Decompose the DID estimand by exact finite summation over the joint law.
pub fn decompose_did(joint: &DiscreteJoint) -> Result<DecompositionReport> {
    joint.validate()?;
    for d in 0..2 {
        if joint.p_d(d) <= 0.0 {
            return Err(Error::Domain(format!("conditioning cell P(D={d}) has probability zero")));
        }
    }
    for dstar in 0..2 {
        if joint.p_dstar(dstar) <= 0.0 {
            return Err(Error::Domain(format!("conditioning cell P(D*={dstar}) has probability zero")));
        }
    }
    let cond_d = |table: &[[f64; 2]; 2], d: usize| -> f64 {
        (table[d][0] * joint.prob[d][0] + table[d][1] * joint.prob[d][1]) / joint.p_d(d)
    };
    let cond_dstar = |table: &[[f64; 2]; 2], dstar: usize| -> f64 {
        (table[0][dstar] * joint.prob[0][dstar] + table[1][dstar] * joint.prob[1][dstar]) / joint.p_dstar(dstar)
    };
    let effect_recorded_treated = cond_d(&joint.effect_mean, 1);
    let trend_gap_recorded = cond_d(&joint.trend_mean, 1) - cond_d(&joint.trend_mean, 0);
    Ok(DecompositionReport {
        effect_recorded_treated,
        trend_gap_recorded,
        did_recorded: effect_recorded_treated + trend_gap_recorded,
        att: cond_dstar(&joint.effect_mean, 1),
        atu: cond_dstar(&joint.effect_mean, 0),
        q1: joint.prob[1][1] / joint.p_d(1),
        q0: joint.prob[0][0] / joint.p_d(0),
        trend_gap_true: cond_dstar(&joint.trend_mean, 1) - cond_dstar(&joint.trend_mean, 0),
    })
}

/// Closed-form predictions under non-differential misclassification: the
/// recorded-treated gain mixes ATT and ATU with weight q1, and the recorded
/// trend gap scales the true trend gap by (q1 + q0 - 1).
pub fn prop1_predict(att: f64, atu: f64, q1: f64, q0: f64, dt_star: f64) -> (f64, f64) {
    (att * q1 + atu * (1.0 - q1), dt_star * (q1 + q0 - 1.0))
}

/// Estimate the joint law over (D, D*) implied by a generative configuration,
/// with cell means of the unit treatment effect and of the untreated gain,
/// by simulation on a fixed derived stream.
pub fn joint_from_dgp(cfg: &DgpConfig, draws: usize) -> Result<DiscreteJoint> {
    if draws < 1000 {
        return Err(Error::Domain("joint estimation needs at least 1000 draws".into()));
    }
    let centering = cfg.centering()?;
    let generator = Generator::new(cfg)?;
    let mut rng = stream(derive_seed(MOMENT_STREAM, 2));
    let mut count = [[0usize; 2]; 2];
    let mut effect = [[0.0f64; 2]; 2];
    let mut trend = [[0.0f64; 2]; 2];
    let mut xo = vec![0.0; cfg.k];
    for _ in 0..draws {
        let u = generator.draw(&mut rng);
        for j in 0..cfg.k {
            xo[j] = u.x[j] - centering[j];
        }
        let dstar = u.dstar as usize;
        let d = (u.dstar && u.s) as usize;
        count[d][dstar] += 1;
        effect[d][dstar] += generator.effect_index(&cfg.theta, &xo);
        trend[d][dstar] += generator.effect_index(&cfg.delta, &xo) + u.dxi;
    }
    let mut prob = [[0.0f64; 2]; 2];
    let mut effect_mean = [[0.0f64; 2]; 2];
    let mut trend_mean = [[0.0f64; 2]; 2];
    for d in 0..2 {
        for s in 0..2 {
            prob[d][s] = count[d][s] as f64 / draws as f64;
            if count[d][s] > 0 {
                effect_mean[d][s] = effect[d][s] / count[d][s] as f64;
                trend_mean[d][s] = trend[d][s] / count[d][s] as f64;
            }
        }
    }
    // Renormalize away the last-digit rounding so validation stays exact.
    let total: f64 = prob.iter().flatten().sum();
    for row in prob.iter_mut() {
        for p in row.iter_mut() {
            *p /= total;
        }
    }
    Ok(DiscreteJoint { prob, effect_mean, trend_mean })
}

// ---------------------------------------------------------------------------
// Closed-form bias of the simple design
// ---------------------------------------------------------------------------

/// Asymptotic bias of the naive FD coefficient in the no-covariate design,
/// evaluated analytically: the attenuation piece uses the bivariate normal
/// law of (U, aggregated recording index), the trend piece uses the
/// truncated-moment formula with the instrument dimension folded into an
/// adjusted correlation.
pub fn simple_did_bias(cfg: &DgpConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.k != 0 {
        return Err(Error::Domain("the simple-design bias needs k = 0".into()));
    }
    let tau = cfg.tau();
    let g0 = cfg.gamma[0];
    let a0 = cfg.alpha[0];
    // Z alpha + V ~ N(a0, 1 + sum alpha_j^2); rescale to a unit-variance
    // index and adjust the correlations with U and with the outcome error.
    let slope_sq: f64 = cfg.alpha[1..].iter().map(|a| a * a).sum();
    let s_z = (1.0 + slope_sq).sqrt();
    let p_dstar = std_normal_cdf(g0);
    let p_d = bvn_cdf(g0, a0 / s_z, cfg.rho / s_z)?;
    if !(p_d > 1e-10 && p_d < 1.0 - 1e-10) {
        return Err(Error::Domain(format!("degenerate observed-treatment probability {p_d}")));
    }
    // One-sided recording: P(D* = 1 | D = 1) = 1.
    let p_dstar_given_d0 = (p_dstar - p_d) / (1.0 - p_d);
    let attenuation = tau * (1.0 - p_dstar_given_d0 - 1.0);
    let e_limit = tallis_moment(g0, a0 / s_z, cfg.rho / s_z, cfg.sigma, cfg.psi_v / s_z)?;
    let trend_gap = e_limit / (p_d * (1.0 - p_d));
    Ok(attenuation + trend_gap)
}

// ---------------------------------------------------------------------------
// Plug-in asymptotic bias with covariates
// ---------------------------------------------------------------------------

struct MomentDraw {
    x: Vec<f64>,
    /// R gamma at the raw covariates.
    gidx: f64,
    /// Z alpha at the raw instruments.
    aidx: f64,
    d: bool,
    dstar: bool,
    t: bool,
}

fn moment_sample_draws(cfg: &DgpConfig, n: usize) -> Result<Vec<MomentDraw>> {
    let generator = Generator::new(cfg)?;
    let mut rng = stream(derive_seed(MOMENT_STREAM, 1));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rand::Rng::random::<f64>(&mut rng) < cfg.lambda;
        let u = generator.draw(&mut rng);
        let mut gidx = cfg.gamma[0];
        for j in 0..cfg.k {
            gidx += cfg.gamma[j + 1] * u.x[j];
        }
        let mut aidx = cfg.alpha[0];
        let shared = cfg.n_shared();
        for j in 0..shared {
            aidx += cfg.alpha[1 + j] * u.x[j];
        }
        for j in 0..cfg.n_instruments {
            aidx += cfg.alpha[1 + shared + j] * u.z[j];
        }
        out.push(MomentDraw { x: u.x, gidx, aidx, d: u.dstar && u.s, dstar: u.dstar, t });
    }
    Ok(out)
}

struct BiasMoments {
    q: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
}

/// Accumulate the projected moments over a subset of draws. `xdot_center` is
/// E[X | D = 1]; `center_true` is the population centering E[X | D* = 1].
fn bias_moments(
    cfg: &DgpConfig,
    draws: &[MomentDraw],
    select: impl Fn(&MomentDraw) -> bool,
    xdot_center: &DVector<f64>,
    center_true: &DVector<f64>,
) -> Result<BiasMoments> {
    let kp1 = cfg.k + 1;
    let mut m_ww = DMatrix::zeros(kp1, kp1);
    let mut m_wr = DMatrix::zeros(kp1, kp1);
    let mut m_rr = DMatrix::zeros(kp1, kp1);
    let mut m_w_ring = DMatrix::zeros(kp1, kp1);
    let mut m_r_ring = DMatrix::zeros(kp1, kp1);
    let mut m_w_wdiff = DMatrix::zeros(kp1, kp1);
    let mut m_r_wdiff = DMatrix::zeros(kp1, kp1);
    let mut c = DVector::zeros(kp1);
    let mut count = 0usize;
    let omr = (1.0 - (cfg.rho / 1.0).powi(2)).sqrt();
    let mut rdot = vec![0.0; kp1];
    let mut ring = vec![0.0; kp1];
    for dr in draws.iter().filter(|d| select(d)) {
        count += 1;
        rdot[0] = 1.0;
        ring[0] = 1.0;
        for j in 0..cfg.k {
            rdot[j + 1] = dr.x[j] - xdot_center[j];
            ring[j + 1] = dr.x[j] - center_true[j];
        }
        let dv = dr.d as i32 as f64;
        let dsv = dr.dstar as i32 as f64;
        let tallis_row = cfg.sigma
            * cfg.psi_v
            * norm_pdf(-dr.aidx)
            * std_normal_cdf((dr.gidx - cfg.rho * dr.aidx) / omr);
        for i in 0..kp1 {
            let wi = dv * rdot[i];
            c[i] += rdot[i] * tallis_row;
            for j in 0..kp1 {
                let rj = rdot[j];
                let wj = dv * rj;
                let ringj = ring[j];
                let wstarj = dsv * ringj;
                m_ww[(i, j)] += wi * wj;
                m_wr[(i, j)] += wi * rj;
                m_rr[(i, j)] += rdot[i] * rj;
                m_w_ring[(i, j)] += wi * ringj;
                m_r_ring[(i, j)] += rdot[i] * ringj;
                m_w_wdiff[(i, j)] += wi * (wstarj - wj);
                m_r_wdiff[(i, j)] += rdot[i] * (wstarj - wj);
            }
        }
    }
    if count == 0 {
        return Err(Error::Domain("empty moment subsample".into()));
    }
    let nf = count as f64;
    for m in [&mut m_ww, &mut m_wr, &mut m_rr, &mut m_w_ring, &mut m_r_ring, &mut m_w_wdiff, &mut m_r_wdiff] {
        *m /= nf;
    }
    c /= nf;
    let m_rr_inv = sym_inverse(&m_rr, "covariate second moment")?;
    let proj = &m_wr * &m_rr_inv;
    let q = &m_ww - &proj * m_wr.transpose();
    let a = &m_w_ring - &proj * &m_r_ring;
    let b = &m_w_wdiff - &proj * &m_r_wdiff;
    Ok(BiasMoments { q, a, b, c })
}

fn mean_rdot_given_d1(cfg: &DgpConfig, draws: &[MomentDraw], xdot_center: &DVector<f64>) -> DVector<f64> {
    let kp1 = cfg.k + 1;
    let mut acc = DVector::zeros(kp1);
    let mut n1 = 0usize;
    for dr in draws.iter().filter(|d| d.d) {
        n1 += 1;
        acc[0] += 1.0;
        for j in 0..cfg.k {
            acc[j + 1] += dr.x[j] - xdot_center[j];
        }
    }
    acc / n1 as f64
}

fn xdot_center_of(cfg: &DgpConfig, draws: &[MomentDraw]) -> Result<DVector<f64>> {
    let mut acc = DVector::zeros(cfg.k);
    let mut n1 = 0usize;
    for dr in draws.iter().filter(|d| d.d) {
        n1 += 1;
        for j in 0..cfg.k {
            acc[j] += dr.x[j];
        }
    }
    if n1 == 0 {
        return Err(Error::Domain("no observed-treated draws in the moment sample".into()));
    }
    Ok(acc / n1 as f64)
}

/// Plug-in asymptotic bias of the naive FD coefficient: population moments
/// approximated on one large simulated design, with the error-truncation
/// column evaluated in closed form per row.
pub fn theorem1_bias_fd(cfg: &DgpConfig, moment_sample: usize) -> Result<f64> {
    cfg.validate()?;
    let center_true = cfg.centering()?;
    let draws = moment_sample_draws(cfg, moment_sample)?;
    let xdot_center = xdot_center_of(cfg, &draws)?;
    let m = bias_moments(cfg, &draws, |_| true, &xdot_center, &center_true)?;
    let delta = DVector::from_column_slice(&cfg.delta);
    let theta = DVector::from_column_slice(&cfg.theta);
    let rhs = &m.a * delta + &m.b * theta + &m.c;
    let bias_theta = sym_inverse(&m.q, "projected treatment second moment")? * rhs;
    let lead = mean_rdot_given_d1(cfg, &draws, &xdot_center);
    Ok(lead.dot(&bias_theta))
}

/// Plug-in asymptotic bias of the naive pooled coefficient, built from the
/// period-specific moment blocks.
pub fn theorem1_bias_pols(cfg: &DgpConfig, moment_sample: usize) -> Result<f64> {
    cfg.validate()?;
    let center_true = cfg.centering()?;
    let draws = moment_sample_draws(cfg, moment_sample)?;
    let xdot_center = xdot_center_of(cfg, &draws)?;
    let delta = DVector::from_column_slice(&cfg.delta);
    let theta = DVector::from_column_slice(&cfg.theta);
    let eta1 = DVector::from_column_slice(&cfg.eta1);
    let eta2 = DVector::from_column_slice(&cfg.eta2);
    let pi1 = &eta1 + &delta;
    let pi2 = &eta2 + &theta;
    let m1 = bias_moments(cfg, &draws, |d| d.t, &xdot_center, &center_true)?;
    let m0 = bias_moments(cfg, &draws, |d| !d.t, &xdot_center, &center_true)?;
    let bias1 = sym_inverse(&m1.q, "post-period treatment second moment")? * (&m1.a * &pi1 + &m1.b * &pi2 + &m1.c);
    let bias0 = sym_inverse(&m0.q, "baseline treatment second moment")? * (&m0.a * &eta1 + &m0.b * &eta2 + &m0.c);
    let lead = mean_rdot_given_d1(cfg, &draws, &xdot_center);
    Ok(lead.dot(&(bias1 - bias0)))
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

/// Per-estimator summary over the replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McEntry {
    pub method: Method,
    pub mean_tau: f64,
    pub bias: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean, sd / sqrt(reps).
    pub mcse: f64,
    pub rmse: f64,
    /// Share of replicates whose CI (tau_hat +- 1.96 se) covers the truth;
    /// absent when standard errors were not requested.
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
    pub reps_used: usize,
}

/// A finished Monte Carlo experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub layout: Layout,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub true_tau: f64,
    pub failed_reps: usize,
    pub entries: Vec<McEntry>,
    pub dgp: DgpConfig,
}

/// Monte Carlo experiment configuration.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub layout: Layout,
    pub methods: Vec<Method>,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Standard-error mode applied to every requested estimator.
    pub se: SeMode,
}

/// Run every requested estimator on `reps` independent datasets and summarize
/// bias, spread, and coverage. Deterministic in the seed: replicate r draws
/// its dataset from stream (seed, 2r) and its bootstrap from (seed, 2r + 1);
/// results are keyed by replicate index before reduction.
pub fn monte_carlo(cfg: &DgpConfig, mc: &McConfig) -> Result<McReport> {
    if mc.reps < 2 {
        return Err(Error::Replicates("the Monte Carlo harness needs at least 2 replications".into()));
    }
    cfg.validate()?;
    let centering = cfg.centering()?;
    let spec = cfg.pop_spec();
    let true_tau = cfg.tau();

    let replicate = |rep: usize| -> Result<Vec<(f64, Option<f64>)>> {
        let ds_seed = derive_seed(mc.seed, 2 * rep as u64);
        let ds = match mc.layout {
            Layout::Panel => simulate_panel_with(cfg, &centering, mc.n, ds_seed)?.0,
            Layout::RepeatedCrossSection => simulate_rcs_with(cfg, &centering, mc.n, ds_seed)?,
        };
        let se_mode = match &mc.se {
            SeMode::Skip => SeMode::Skip,
            SeMode::Analytic => SeMode::Analytic,
            SeMode::DefaultBootstrap => SeMode::Bootstrap(estimators::BootstrapPlan {
                seed: derive_seed(mc.seed, 2 * rep as u64 + 1),
                ..Default::default()
            }),
            SeMode::Bootstrap(plan) => SeMode::Bootstrap(estimators::BootstrapPlan {
                seed: derive_seed(mc.seed, 2 * rep as u64 + 1),
                ..plan.clone()
            }),
        };
        let opts = EstimatorOptions { se: se_mode, ..Default::default() };
        let mut out = Vec::with_capacity(mc.methods.len());
        for &method in &mc.methods {
            let est = run_estimator(method, &ds, &spec, &opts)?;
            out.push((est.tau_att, est.se_tau));
        }
        Ok(out)
    };

    let results: Vec<Result<Vec<(f64, Option<f64>)>>> =
        (0..mc.reps).into_par_iter().map(replicate).collect();

    let mut failed = Vec::new();
    let mut kept: Vec<&Vec<(f64, Option<f64>)>> = Vec::with_capacity(mc.reps);
    for (rep, res) in results.iter().enumerate() {
        match res {
            Ok(v) => kept.push(v),
            Err(_) => failed.push(rep),
        }
    }
    if failed.len() * 20 > mc.reps {
        return Err(Error::Replicates(format!(
            "{} of {} replicates failed (first failures at indices {:?})",
            failed.len(),
            mc.reps,
            &failed[..failed.len().min(5)]
        )));
    }

    let mut entries = Vec::with_capacity(mc.methods.len());
    for (mi, &method) in mc.methods.iter().enumerate() {
        let taus: Vec<f64> = kept.iter().map(|v| v[mi].0).collect();
        let ses: Vec<Option<f64>> = kept.iter().map(|v| v[mi].1).collect();
        let reps_used = taus.len();
        let mean = taus.iter().sum::<f64>() / reps_used as f64;
        let var = taus.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps_used - 1) as f64;
        let sd = var.sqrt();
        let rmse = (taus.iter().map(|v| (v - true_tau) * (v - true_tau)).sum::<f64>() / reps_used as f64).sqrt();
        let have_se = ses.iter().all(|s| s.is_some());
        let coverage = have_se.then(|| {
            let hits = taus
                .iter()
                .zip(&ses)
                .filter(|(t, s)| (*t - true_tau).abs() <= 1.96 * s.unwrap())
                .count();
            hits as f64 / reps_used as f64
        });
        let mean_se = have_se.then(|| ses.iter().map(|s| s.unwrap()).sum::<f64>() / reps_used as f64);
        entries.push(McEntry {
            method,
            mean_tau: mean,
            bias: mean - true_tau,
            sd,
            mcse: sd / (reps_used as f64).sqrt(),
            rmse,
            coverage,
            mean_se,
            reps_used,
        });
    }
    Ok(McReport {
        layout: mc.layout,
        n: mc.n,
        reps: mc.reps,
        seed: mc.seed,
        true_tau,
        failed_reps: failed.len(),
        entries,
    dgp: cfg.clone(),
    })
}

/// Dispatch one estimator by method tag.
pub fn run_estimator(
    method: Method,
    ds: &Dataset,
    spec: &PopSpec,
    opts: &EstimatorOptions,
) -> Result<DidEstimate> {
    match method {
        Method::NaiveFd => estimators::did_fd_naive(ds, opts),
        Method::NaivePols => estimators::did_pols_naive(ds, opts),
        Method::TwostepFd => estimators::did_fd_twostep(ds, spec, opts),
        Method::TwostepPols => estimators::did_pols_twostep(ds, spec, opts),
        Method::InfeasibleFd => estimators::did_fd_infeasible(ds, opts),
        Method::InfeasiblePols => estimators::did_pols_infeasible(ds, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn certain_recording_means_observed_equals_true() {
        let cfg = DgpConfig { alpha: vec![8.0, 0.9], ..DgpConfig::benchmark() };
        let ds = simulate_panel(&cfg, 2_000, 13).unwrap();
        let d = ds.column("d").unwrap();
        let dstar = ds.column("dstar").unwrap();
        assert_eq!(d, dstar);
    }

    #[test]
    fn zero_gamma_gives_half_treated() {
        let cfg = DgpConfig { gamma: vec![0.0, 0.0], ..DgpConfig::benchmark() };
        let n = 100_000;
        let ds = simulate_panel(&cfg, n, 17).unwrap();
        let share = ds.column("dstar").unwrap().iter().sum::<f64>() / (2 * n) as f64;
        // Binomial standard error at p = 1/2.
        let se = 0.5 / (n as f64).sqrt();
        assert!((share - 0.5).abs() < 3.0 * se, "share = {share}");
    }

    #[test]
    fn latent_moments_match_error_covariance() {
        let cfg = DgpConfig::benchmark();
        let n = 100_000;
        let centering = cfg.centering().unwrap();
        let (_, latents) = simulate_panel_with(&cfg, &centering, n, 19).unwrap();
        let target = cfg.sigma_matrix();
        for i in 0..3 {
            for j in 0..3 {
                let m = latents.iter().map(|l| l[i] * l[j]).sum::<f64>() / n as f64;
                assert!((m - target[(i, j)]).abs() < 0.02, "moment [{i}{j}] = {m}");
            }
        }
    }

    #[test]
    fn rcs_period_share_matches_lambda() {
        let cfg = DgpConfig::benchmark();
        let n = 100_000;
        let ds = simulate_rcs(&cfg, n, 23).unwrap();
        let share = ds.column("t").unwrap().iter().sum::<f64>() / n as f64;
        let se = 0.5 / (n as f64).sqrt();
        assert!((share - 0.5).abs() < 3.0 * se, "share = {share}");
    }

    #[test]
    fn same_seed_identical_dataset() {
        let cfg = DgpConfig::benchmark();
        let a = simulate_rcs(&cfg, 500, 29).unwrap();
        let b = simulate_rcs(&cfg, 500, 29).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centering_matches_closed_form_for_one_covariate() {
        // k = 1: E[X | D* = 1] = (g1/s) phi(g0/s) / Phi(g0/s), s^2 = 1 + g1^2.
        let cfg = DgpConfig::benchmark();
        let mu = cfg.centering().unwrap();
        let s = (1.0 + cfg.gamma[1] * cfg.gamma[1]).sqrt();
        let m = cfg.gamma[0] / s;
        let expect = (cfg.gamma[1] / s) * norm_pdf(m) / std_normal_cdf(m);
        assert!((mu[0] - expect).abs() < 0.005, "centering {} vs {expect}", mu[0]);
    }

    #[test]
    fn near_deterministic_rcs_recovers_theta() {
        let cfg = DgpConfig {
            sigma: 1e-8,
            psi_v: 0.0,
            ..DgpConfig::benchmark()
        };
        let ds = simulate_rcs(&cfg, 50_000, 31).unwrap();
        let est = estimators::did_pols_infeasible(
            &ds,
            &EstimatorOptions { se: SeMode::Skip, ..Default::default() },
        )
        .unwrap();
        assert!((est.tau_att - cfg.tau()).abs() < 1e-3, "tau = {}", est.tau_att);
        assert!((est.theta[1] - cfg.theta[1]).abs() < 1e-3, "kappa = {}", est.theta[1]);
    }

    #[test]
    fn perfect_classification_reduces_to_true_quantities() {
        let joint = DiscreteJoint {
            prob: [[0.6, 0.0], [0.0, 0.4]],
            effect_mean: [[0.0, 2.0], [0.5, 2.0]],
            trend_mean: [[0.1, 0.7], [0.1, 0.7]],
        };
        let rep = decompose_did(&joint).unwrap();
        assert_abs_diff_eq!(rep.q1, 1.0);
        assert_abs_diff_eq!(rep.q0, 1.0);
        assert_abs_diff_eq!(rep.effect_recorded_treated, rep.att, epsilon = 1e-15);
        assert_abs_diff_eq!(rep.trend_gap_recorded, rep.trend_gap_true, epsilon = 1e-15);
    }

    #[test]
    fn known_mixture_reproduces_hand_computation() {
        // q1 = 0.7, q0 = 0.9, ATT = 2, ATU = 0.5, non-differential:
        // recorded-treated gain = 2*0.7 + 0.5*0.3 = 1.55.
        // Cell probabilities with P(D=1) = 0.4, P(D=0) = 0.6:
        let prob = [[0.54, 0.06], [0.12, 0.28]];
        let joint = DiscreteJoint::non_differential(prob, [0.5, 2.0], [0.3, 0.3]);
        let rep = decompose_did(&joint).unwrap();
        assert_abs_diff_eq!(rep.q1, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.q0, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.effect_recorded_treated, 1.55, epsilon = 1e-12);
        let (p1, p2) = prop1_predict(rep.att, rep.atu, rep.q1, rep.q0, rep.trend_gap_true);
        assert_abs_diff_eq!(rep.effect_recorded_treated, p1, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.trend_gap_recorded, p2, epsilon = 1e-12);
    }

    #[test]
    fn flat_true_trends_stay_flat_when_recorded() {
        let prob = [[0.5, 0.1], [0.1, 0.3]];
        let joint = DiscreteJoint::non_differential(prob, [0.0, 1.0], [0.4, 0.4]);
        let rep = decompose_did(&joint).unwrap();
        assert_abs_diff_eq!(rep.trend_gap_true, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rep.trend_gap_recorded, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn balanced_misclassification_kills_the_recorded_gap() {
        // q1 + q0 = 1 makes the recorded trend gap vanish whatever dt_star.
        let (_, p2) = prop1_predict(2.0, 0.5, 0.3, 0.7, 1.25);
        assert_abs_diff_eq!(p2, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_probability_cell_is_rejected() {
        let joint = DiscreteJoint::non_differential([[0.0, 0.0], [0.5, 0.5]], [0.0, 1.0], [0.0, 0.0]);
        let err = decompose_did(&joint).unwrap_err();
        assert!(err.to_string().contains("probability zero"), "{err}");
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let joint = DiscreteJoint::non_differential([[0.3, 0.2], [0.2, 0.2]], [0.0, 1.0], [0.0, 0.0]);
        assert!(decompose_did(&joint).is_err());
    }

    #[test]
    fn certain_recording_has_no_simple_bias() {
        let cfg = DgpConfig { alpha: vec![8.0, 0.9], ..DgpConfig::benchmark_k0() };
        let bias = simple_did_bias(&cfg).unwrap();
        assert!(bias.abs() < 1e-8, "bias = {bias}");
    }

    #[test]
    fn simple_bias_requires_no_covariates() {
        assert!(simple_did_bias(&DgpConfig::benchmark()).is_err());
    }

    #[test]
    fn clean_dgp_has_no_fd_bias() {
        let cfg = DgpConfig::clean();
        let bias = theorem1_bias_fd(&cfg, 200_000).unwrap();
        assert!(bias.abs() < 1e-3, "bias = {bias}");
        let bias_p = theorem1_bias_pols(&cfg, 200_000).unwrap();
        assert!(bias_p.abs() < 2e-3, "pols bias = {bias_p}");
    }

    #[test]
    fn smoke_monte_carlo_report_is_well_formed() {
        let cfg = DgpConfig::benchmark();
        let mc = McConfig {
            layout: Layout::Panel,
            methods: vec![Method::NaiveFd, Method::InfeasibleFd],
            n: 400,
            reps: 2,
            seed: 7,
            se: SeMode::Analytic,
        };
        let report = monte_carlo(&cfg, &mc).unwrap();
        assert_eq!(report.entries.len(), 2);
        for e in &report.entries {
            assert_eq!(e.reps_used, 2);
            let c = e.coverage.unwrap();
            assert!(c == 0.0 || c == 0.5 || c == 1.0, "coverage {c}");
            assert!((e.mcse - e.sd / (2.0_f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let cfg = DgpConfig::benchmark();
        let mc = McConfig {
            layout: Layout::RepeatedCrossSection,
            methods: vec![Method::NaivePols],
            n: 300,
            reps: 4,
            seed: 11,
            se: SeMode::Skip,
        };
        let a = monte_carlo(&cfg, &mc).unwrap();
        let b = monte_carlo(&cfg, &mc).unwrap();
        assert_eq!(a.entries[0].mean_tau, b.entries[0].mean_tau);
        assert_eq!(a.entries[0].sd, b.entries[0].sd);
    }
}
