//! Naive and two-step ATT estimators.
//!
//! All four estimators share one regression core. Covariates are centered at
//! a weighted treated mean, the design interacts the centered block with the
//! treatment weight, and the ATT aggregates the treatment block over the
//! weighting group:
//!
//! - naive: weight = observed treatment indicator `D`;
//! - two-step: weight = first-stage prediction `Phi(R gamma_hat)`, with the
//!   predicted-probability total playing the role of the treated count;
//! - infeasible benchmark: weight = the true `D*` column when the data
//!   carries one.
//!
//! Because the centered covariates average exactly zero over the weighting
//! group, the aggregated ATT equals the lead coefficient of the treatment
//! block; the aggregation is still carried out explicitly.
//!
//! Standard errors default to the bootstrap, re-estimating both stages per
//! replicate. The analytic sandwich for the two-step estimators assembles
//! per-observation influences from the second-stage residual, the estimated
//! first-stage parameters, and the estimated centering, then projects onto
//! the ATT.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{demean, first_difference, Dataset, Layout};
use crate::error::{Error, Result};
use crate::numerics::linalg::{fw_residualize, ols_solve, sym_inverse};
use crate::numerics::normal::norm_pdf;
use crate::numerics::rng::{derive_seed, stream};
use crate::pop::{pop_design, pop_fit, pop_score_rows, with_intercept, PopFit, PopOptions, PopSpec};

/// Estimator identity carried on every estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "naive-FD")]
    NaiveFd,
    #[serde(rename = "naive-POLS")]
    NaivePols,
    #[serde(rename = "twostep-FD")]
    TwostepFd,
    #[serde(rename = "twostep-POLS")]
    TwostepPols,
    #[serde(rename = "infeasible-FD")]
    InfeasibleFd,
    #[serde(rename = "infeasible-POLS")]
    InfeasiblePols,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::NaiveFd => "naive-FD",
            Method::NaivePols => "naive-POLS",
            Method::TwostepFd => "twostep-FD",
            Method::TwostepPols => "twostep-POLS",
            Method::InfeasibleFd => "infeasible-FD",
            Method::InfeasiblePols => "infeasible-POLS",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "naive-fd" | "naive-FD" => Ok(Method::NaiveFd),
            "naive-pols" | "naive-POLS" => Ok(Method::NaivePols),
            "twostep-fd" | "twostep-FD" => Ok(Method::TwostepFd),
            "twostep-pols" | "twostep-POLS" => Ok(Method::TwostepPols),
            "infeasible-fd" | "infeasible-FD" => Ok(Method::InfeasibleFd),
            "infeasible-pols" | "infeasible-POLS" => Ok(Method::InfeasiblePols),
            other => Err(Error::Estimation(format!("unknown estimator '{other}'"))),
        }
    }
}

/// How a reported standard error was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeSource {
    Analytic,
    Bootstrap,
}

/// Resampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    /// Panel: resample units with replacement, keeping both rows of a unit.
    UnitResample,
    /// Repeated cross-sections: resample rows within each time stratum.
    StratifiedByT,
}

/// Bootstrap configuration. 200 replications is the default throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replications: usize,
    pub seed: u64,
    /// Filled from the dataset layout when absent.
    #[serde(default)]
    pub scheme: Option<ResampleScheme>,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan { replications: 200, seed: 0, scheme: None }
    }
}

/// Standard-error request attached to an estimator run.
#[derive(Debug, Clone, Default)]
pub enum SeMode {
    /// Point estimate only.
    Skip,
    /// Bootstrap with the default plan.
    #[default]
    DefaultBootstrap,
    Bootstrap(BootstrapPlan),
    Analytic,
}

/// Options shared by the estimator entry points.
#[derive(Debug, Clone, Default)]
pub struct EstimatorOptions {
    pub se: SeMode,
    /// First-stage controls for the two-step estimators.
    pub pop: PopOptions,
}

/// Bootstrap diagnostics carried on an estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootDiag {
    pub replications: usize,
    pub used: usize,
    pub failed: usize,
}

/// Nuisance coefficient blocks, when the design estimates them.
#[derive(Debug, Clone, Default)]
pub struct Nuisance {
    pub delta: Option<DVector<f64>>,
    pub eta1: Option<DVector<f64>>,
    pub eta2: Option<DVector<f64>>,
}

/// A fitted ATT.
#[derive(Debug, Clone)]
pub struct DidEstimate {
    pub method: Method,
    /// Treatment-block coefficients, ATT lead coefficient first.
    pub theta: DVector<f64>,
    /// Aggregated ATT.
    pub tau_att: f64,
    pub se_tau: Option<f64>,
    pub se_source: Option<SeSource>,
    pub nuisance: Nuisance,
    pub first_stage: Option<PopFit>,
    pub n_obs: usize,
    pub boot: Option<BootDiag>,
}

// ---------------------------------------------------------------------------
// Regression cores
// ---------------------------------------------------------------------------

/// Pieces of a weighted first-difference fit kept for variance assembly.
#[derive(Debug)]
pub(crate) struct FdParts {
    pub n: usize,
    /// Intercept plus centered covariates.
    pub r_c: DMatrix<f64>,
    /// Treatment-weighted copy of `r_c`.
    pub w_c: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub delta: DVector<f64>,
    pub theta: DVector<f64>,
    pub resid: DVector<f64>,
    pub tau: f64,
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| w[i] * m[(i, j)])
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

fn check_overlap(weights: &DVector<f64>) -> Result<()> {
    if weights.iter().all(|&w| w < 1e-6) {
        return Err(Error::Estimation(
            "overlap failure: all treatment weights are essentially zero".into(),
        ));
    }
    Ok(())
}

/// ATT aggregation: weight-weighted average of the unit-level effect index.
fn aggregate_att(r_c: &DMatrix<f64>, theta: &DVector<f64>, weights: &DVector<f64>) -> f64 {
    let idx = r_c * theta;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..idx.len() {
        num += weights[i] * idx[i];
        den += weights[i];
    }
    num / den
}

/// Weighted FD regression: dy on (1, Xc) and weight * (1, Xc), covariates
/// centered at the weighted treated mean.
pub(crate) fn fd_core(dy: &DVector<f64>, x: &DMatrix<f64>, weights: &DVector<f64>) -> Result<FdParts> {
    check_overlap(weights)?;
    let dm = demean(x, weights)?;
    let r_c = with_intercept(&dm.x_centered);
    let w_c = scale_rows(&r_c, weights);
    let design = hcat(&r_c, &w_c);
    let (beta, resid) = ols_solve(&design, dy)?;
    let kp1 = r_c.ncols();
    let delta = DVector::from(beta.rows(0, kp1));
    let theta = DVector::from(beta.rows(kp1, kp1));
    let tau = aggregate_att(&r_c, &theta, weights);
    Ok(FdParts { n: dy.len(), r_c, w_c, weights: weights.clone(), delta, theta, resid, tau })
}

/// Pieces of a weighted pooled (interacted) fit.
#[derive(Debug)]
pub(crate) struct PolsParts {
    pub n: usize,
    pub r_c: DMatrix<f64>,
    pub w_c: DMatrix<f64>,
    pub t: DVector<f64>,
    pub weights: DVector<f64>,
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
    pub delta: DVector<f64>,
    pub theta: DVector<f64>,
    pub resid: DVector<f64>,
    pub tau: f64,
}

/// Weighted pooled regression: y on (Rc, W, T*Rc, T*W), covariates centered
/// at the pooled weighted mean.
pub(crate) fn pols_core(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    t: &DVector<f64>,
    weights: &DVector<f64>,
) -> Result<PolsParts> {
    check_overlap(weights)?;
    let dm = demean(x, weights)?;
    let r_c = with_intercept(&dm.x_centered);
    let w_c = scale_rows(&r_c, weights);
    let tr = scale_rows(&r_c, t);
    let tw = scale_rows(&w_c, t);
    let design = hcat(&hcat(&r_c, &w_c), &hcat(&tr, &tw));
    let (beta, resid) = ols_solve(&design, y)?;
    let kp1 = r_c.ncols();
    let eta1 = DVector::from(beta.rows(0, kp1));
    let eta2 = DVector::from(beta.rows(kp1, kp1));
    let delta = DVector::from(beta.rows(2 * kp1, kp1));
    let theta = DVector::from(beta.rows(3 * kp1, kp1));
    let tau = aggregate_att(&r_c, &theta, weights);
    Ok(PolsParts {
        n: y.len(),
        r_c,
        w_c,
        t: t.clone(),
        weights: weights.clone(),
        eta1,
        eta2,
        delta,
        theta,
        resid,
        tau,
    })
}

fn require_cells(d: &DVector<f64>, t: &DVector<f64>) -> Result<()> {
    let mut counts = [[0usize; 2]; 2];
    for i in 0..d.len() {
        counts[d[i] as usize][t[i] as usize] += 1;
    }
    for (dv, row) in counts.iter().enumerate() {
        for (tv, &c) in row.iter().enumerate() {
            if c == 0 {
                return Err(Error::Estimation(format!("empty cell: D={dv}, T={tv}")));
            }
        }
    }
    Ok(())
}

fn require_both_times(t: &DVector<f64>) -> Result<()> {
    let ones = t.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == t.len() {
        return Err(Error::Estimation("time indicator is constant".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset-level inputs
// ---------------------------------------------------------------------------

struct RcsData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    t: DVector<f64>,
    d: DVector<f64>,
    dstar: Option<DVector<f64>>,
}

fn rcs_data(ds: &Dataset) -> Result<RcsData> {
    if ds.layout != Layout::RepeatedCrossSection {
        return Err(Error::Estimation("estimator requires a repeated cross-section layout".into()));
    }
    let col = |name: &str| -> Result<DVector<f64>> { Ok(DVector::from_column_slice(ds.column(name)?)) };
    Ok(RcsData {
        y: col(&ds.roles.outcome)?,
        x: ds.matrix_of(&ds.roles.covariates, None)?,
        t: col(&ds.roles.time)?,
        d: col(&ds.roles.treatment)?,
        dstar: match &ds.roles.true_treatment {
            Some(c) => Some(col(c)?),
            None => None,
        },
    })
}

fn require_panel(ds: &Dataset) -> Result<()> {
    if ds.layout != Layout::Panel {
        return Err(Error::Estimation("estimator requires a panel layout".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public estimators
// ---------------------------------------------------------------------------

fn naive_fd_parts(ds: &Dataset) -> Result<FdParts> {
    let fd = first_difference(ds)?;
    if fd.d.iter().all(|&v| v == 0.0) {
        return Err(Error::Estimation("no treated units".into()));
    }
    fd_core(&fd.dy, &fd.x, &fd.d)
}

/// First-difference regression on the observed treatment.
pub fn did_fd_naive(panel: &Dataset, opts: &EstimatorOptions) -> Result<DidEstimate> {
    require_panel(panel)?;
    let parts = naive_fd_parts(panel)?;
    finish_fd(panel, Method::NaiveFd, parts, opts, &naive_fd_parts)
}

fn naive_pols_parts(ds: &Dataset) -> Result<PolsParts> {
    let data = rcs_data(ds)?;
    require_cells(&data.d, &data.t)?;
    pols_core(&data.y, &data.x, &data.t, &data.d)
}

/// Pooled interacted regression on the observed treatment.
pub fn did_pols_naive(rcs: &Dataset, opts: &EstimatorOptions) -> Result<DidEstimate> {
    let parts = naive_pols_parts(rcs)?;
    finish_pols(rcs, Method::NaivePols, parts, opts, &naive_pols_parts)
}

fn infeasible_fd_parts(ds: &Dataset) -> Result<FdParts> {
    let fd = first_difference(ds)?;
    let dstar = fd
        .dstar
        .ok_or_else(|| Error::Estimation("no true-treatment column for the infeasible benchmark".into()))?;
    fd_core(&fd.dy, &fd.x, &dstar)
}

/// Infeasible benchmark: FD regression on the true treatment column.
pub fn did_fd_infeasible(panel: &Dataset, opts: &EstimatorOptions) -> Result<DidEstimate> {
    require_panel(panel)?;
    let parts = infeasible_fd_parts(panel)?;
    finish_fd(panel, Method::InfeasibleFd, parts, opts, &infeasible_fd_parts)
}

fn infeasible_pols_parts(ds: &Dataset) -> Result<PolsParts> {
    let data = rcs_data(ds)?;
    let dstar = data
        .dstar
        .ok_or_else(|| Error::Estimation("no true-treatment column for the infeasible benchmark".into()))?;
    require_both_times(&data.t)?;
    pols_core(&data.y, &data.x, &data.t, &dstar)
}

/// Infeasible benchmark for repeated cross-sections.
pub fn did_pols_infeasible(rcs: &Dataset, opts: &EstimatorOptions) -> Result<DidEstimate> {
    let parts = infeasible_pols_parts(rcs)?;
    finish_pols(rcs, Method::InfeasiblePols, parts, opts, &infeasible_pols_parts)
}

fn finish_fd(
    ds: &Dataset,
    method: Method,
    parts: FdParts,
    opts: &EstimatorOptions,
    point: &(dyn Fn(&Dataset) -> Result<FdParts> + Sync),
) -> Result<DidEstimate> {
    let (se_tau, se_source, boot) = match &opts.se {
        SeMode::Skip => (None, None, None),
        SeMode::Analytic => {
            let design = hcat(&parts.r_c, &parts.w_c);
            let se = hc1_se(&design, &parts.resid, parts.r_c.ncols(), &parts.r_c, &parts.weights)?;
            (Some(se), Some(SeSource::Analytic), None)
        }
        mode => {
            let plan = resolve_plan(mode, ds.layout);
            let (se, taus, failed) = bootstrap_se(ds, |rep| point(rep).map(|p| p.tau), &plan)?;
            (
                Some(se),
                Some(SeSource::Bootstrap),
                Some(BootDiag { replications: plan.replications, used: taus.len(), failed }),
            )
        }
    };
    Ok(DidEstimate {
        method,
        theta: parts.theta,
        tau_att: parts.tau,
        se_tau,
        se_source,
        nuisance: Nuisance { delta: Some(parts.delta), eta1: None, eta2: None },
        first_stage: None,
        n_obs: parts.n,
        boot,
    })
}

fn finish_pols(
    ds: &Dataset,
    method: Method,
    parts: PolsParts,
    opts: &EstimatorOptions,
    point: &(dyn Fn(&Dataset) -> Result<PolsParts> + Sync),
) -> Result<DidEstimate> {
    let (se_tau, se_source, boot) = match &opts.se {
        SeMode::Skip => (None, None, None),
        SeMode::Analytic => {
            let tr = scale_rows(&parts.r_c, &parts.t);
            let tw = scale_rows(&parts.w_c, &parts.t);
            let design = hcat(&hcat(&parts.r_c, &parts.w_c), &hcat(&tr, &tw));
            let se = hc1_se(&design, &parts.resid, 3 * parts.r_c.ncols(), &parts.r_c, &parts.weights)?;
            (Some(se), Some(SeSource::Analytic), None)
        }
        mode => {
            let plan = resolve_plan(mode, ds.layout);
            let (se, taus, failed) = bootstrap_se(ds, |rep| point(rep).map(|p| p.tau), &plan)?;
            (
                Some(se),
                Some(SeSource::Bootstrap),
                Some(BootDiag { replications: plan.replications, used: taus.len(), failed }),
            )
        }
    };
    Ok(DidEstimate {
        method,
        theta: parts.theta,
        tau_att: parts.tau,
        se_tau,
        se_source,
        nuisance: Nuisance {
            delta: Some(parts.delta),
            eta1: Some(parts.eta1),
            eta2: Some(parts.eta2),
        },
        first_stage: None,
        n_obs: parts.n,
        boot,
    })
}

/// Heteroskedasticity-robust (HC1) standard error for the aggregated ATT.
/// `theta_offset` locates the treatment block inside the design; the
/// projection vector is the weighted mean of `r_c`, zero elsewhere.
fn hc1_se(
    design: &DMatrix<f64>,
    resid: &DVector<f64>,
    theta_offset: usize,
    r_c: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<f64> {
    let n = design.nrows();
    let kdim = design.ncols();
    let xtx = design.transpose() * design;
    let xtx_inv = sym_inverse(&xtx, "design gram matrix")?;
    let scaled = scale_rows(design, resid);
    let meat = scaled.transpose() * &scaled;
    let dof = (n as f64) / ((n - kdim) as f64);
    let vcov = &xtx_inv * meat * &xtx_inv * dof;
    let kp1 = r_c.ncols();
    let wsum: f64 = weights.sum();
    let mut ell = DVector::zeros(kdim);
    for j in 0..kp1 {
        let mut acc = 0.0;
        for i in 0..r_c.nrows() {
            acc += weights[i] * r_c[(i, j)];
        }
        ell[theta_offset + j] = acc / wsum;
    }
    let var = (ell.transpose() * vcov * ell)[(0, 0)];
    Ok(var.max(0.0).sqrt())
}

fn resolve_plan(mode: &SeMode, layout: Layout) -> BootstrapPlan {
    let mut plan = match mode {
        SeMode::Bootstrap(p) => p.clone(),
        _ => BootstrapPlan::default(),
    };
    if plan.scheme.is_none() {
        plan.scheme = Some(match layout {
            Layout::Panel => ResampleScheme::UnitResample,
            Layout::RepeatedCrossSection => ResampleScheme::StratifiedByT,
        });
    }
    plan
}

// ---------------------------------------------------------------------------
// Two-step estimators
// ---------------------------------------------------------------------------

/// Everything the two-step FD pipeline produces, kept for the sandwich.
pub(crate) struct TwostepFdFit {
    pub parts: FdParts,
    pub fit: PopFit,
    /// Raw first-stage design rows at the unit level (intercept + covariates).
    pub r_raw: DMatrix<f64>,
    pub z_raw: DMatrix<f64>,
    pub d_obs: DVector<f64>,
}

pub(crate) fn twostep_fd_point(panel: &Dataset, spec: &PopSpec, pop_opts: &PopOptions) -> Result<TwostepFdFit> {
    require_panel(panel)?;
    let fd = first_difference(panel)?;
    let design = pop_design(panel, spec, pop_opts.rcs_first_stage)?;
    let fit = pop_fit(panel, spec, pop_opts)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "first stage did not converge: {}",
            fit.notes.join("; ")
        )));
    }
    let dhat = crate::pop::predict_dstar(&fit, &design.r)?;
    let parts = fd_core(&fd.dy, &fd.x, &dhat)?;
    Ok(TwostepFdFit { parts, fit, r_raw: design.r, z_raw: design.z, d_obs: design.d })
}

/// Two-step FD estimator: partial-observability first stage, then the
/// first-difference regression on predicted treatment probabilities.
pub fn did_fd_twostep(panel: &Dataset, spec: &PopSpec, opts: &EstimatorOptions) -> Result<DidEstimate> {
    let full = twostep_fd_point(panel, spec, &opts.pop)?;
    let (se_tau, se_source, boot) = match &opts.se {
        SeMode::Skip => (None, None, None),
        SeMode::Analytic => {
            let (_, se) = avar_fd_twostep(&full)?;
            (Some(se), Some(SeSource::Analytic), None)
        }
        mode => {
            let plan = resolve_plan(mode, panel.layout);
            let rep_opts = PopOptions {
                warm_start: Some(full.fit.params()),
                compute_vcov: false,
                ..opts.pop.clone()
            };
            let (se, taus, failed) = bootstrap_se(
                panel,
                |rep| twostep_fd_point(rep, spec, &rep_opts).map(|f| f.parts.tau),
                &plan,
            )?;
            (
                Some(se),
                Some(SeSource::Bootstrap),
                Some(BootDiag { replications: plan.replications, used: taus.len(), failed }),
            )
        }
    };
    Ok(DidEstimate {
        method: Method::TwostepFd,
        theta: full.parts.theta.clone(),
        tau_att: full.parts.tau,
        se_tau,
        se_source,
        nuisance: Nuisance { delta: Some(full.parts.delta.clone()), eta1: None, eta2: None },
        first_stage: Some(full.fit),
        n_obs: full.parts.n,
        boot,
    })
}

pub(crate) struct TwostepPolsFit {
    pub parts: PolsParts,
    pub fit: PopFit,
    pub r_raw: DMatrix<f64>,
    pub z_raw: DMatrix<f64>,
    pub d_obs: DVector<f64>,
}

pub(crate) fn twostep_pols_point(rcs: &Dataset, spec: &PopSpec, pop_opts: &PopOptions) -> Result<TwostepPolsFit> {
    let data = rcs_data(rcs)?;
    require_both_times(&data.t)?;
    let fit = pop_fit(rcs, spec, pop_opts)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "first stage did not converge: {}",
            fit.notes.join("; ")
        )));
    }
    // Predictions cover every pooled row even when the first stage is fitted
    // at baseline only; the sandwich also needs the pooled first-stage rows.
    let r_all = with_intercept(&rcs.matrix_of(&spec.covariates, None)?);
    let z_all = pop_design(rcs, spec, crate::pop::RcsFirstStage::Pooled)?;
    let dhat = crate::pop::predict_dstar(&fit, &r_all)?;
    let parts = pols_core(&data.y, &data.x, &data.t, &dhat)?;
    Ok(TwostepPolsFit { parts, fit, r_raw: r_all, z_raw: z_all.z, d_obs: z_all.d })
}

/// Two-step estimator for repeated cross-sections.
pub fn did_pols_twostep(rcs: &Dataset, spec: &PopSpec, opts: &EstimatorOptions) -> Result<DidEstimate> {
    let full = twostep_pols_point(rcs, spec, &opts.pop)?;
    let (se_tau, se_source, boot) = match &opts.se {
        SeMode::Skip => (None, None, None),
        SeMode::Analytic => {
            let (_, se) = avar_pols_twostep(&full)?;
            (Some(se), Some(SeSource::Analytic), None)
        }
        mode => {
            let plan = resolve_plan(mode, rcs.layout);
            let rep_opts = PopOptions {
                warm_start: Some(full.fit.params()),
                compute_vcov: false,
                ..opts.pop.clone()
            };
            let (se, taus, failed) = bootstrap_se(
                rcs,
                |rep| twostep_pols_point(rep, spec, &rep_opts).map(|f| f.parts.tau),
                &plan,
            )?;
            (
                Some(se),
                Some(SeSource::Bootstrap),
                Some(BootDiag { replications: plan.replications, used: taus.len(), failed }),
            )
        }
    };
    Ok(DidEstimate {
        method: Method::TwostepPols,
        theta: full.parts.theta.clone(),
        tau_att: full.parts.tau,
        se_tau,
        se_source,
        nuisance: Nuisance {
            delta: Some(full.parts.delta.clone()),
            eta1: Some(full.parts.eta1.clone()),
            eta2: Some(full.parts.eta2.clone()),
        },
        first_stage: Some(full.fit),
        n_obs: full.parts.n,
        boot,
    })
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Resample a dataset according to the scheme.
fn resample(ds: &Dataset, scheme: ResampleScheme, seed: u64) -> Result<Dataset> {
    let mut rng = stream(seed);
    let names: Vec<String> = ds.column_names().map(str::to_owned).collect();
    let n_cols = names.len();
    let mut cols: Vec<(String, Vec<f64>)> = names.into_iter().map(|n| (n, Vec::new())).collect();
    let source: Vec<&[f64]> = (0..n_cols)
        .map(|j| ds.column(&cols[j].0).expect("column exists"))
        .collect();
    match scheme {
        ResampleScheme::UnitResample => {
            let id_name = ds
                .roles
                .id
                .clone()
                .ok_or_else(|| Error::Estimation("unit resampling needs a panel".into()))?;
            let time = ds.column(&ds.roles.time)?;
            let ids = ds.column(&id_name)?;
            let mut seen: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
            let mut units: Vec<[usize; 2]> = Vec::new();
            for (row, &id) in ids.iter().enumerate() {
                let slot = *seen.entry(id.to_bits()).or_insert_with(|| {
                    units.push([usize::MAX, usize::MAX]);
                    units.len() - 1
                });
                units[slot][time[row] as usize] = row;
            }
            let n_units = units.len();
            // Resampled units get fresh ids so the replicate stays a valid
            // balanced panel even when a unit is drawn twice.
            for new_id in 0..n_units {
                let pick = units[rng.random_range(0..n_units)];
                for row in pick {
                    for (j, col) in cols.iter_mut().enumerate() {
                        if col.0 == id_name {
                            col.1.push(new_id as f64);
                        } else {
                            col.1.push(source[j][row]);
                        }
                    }
                }
            }
        }
        ResampleScheme::StratifiedByT => {
            let t = ds.column(&ds.roles.time)?;
            let mut strata = [Vec::new(), Vec::new()];
            for (row, &tv) in t.iter().enumerate() {
                strata[tv as usize].push(row);
            }
            for stratum in &strata {
                for _ in 0..stratum.len() {
                    let row = stratum[rng.random_range(0..stratum.len())];
                    for (j, col) in cols.iter_mut().enumerate() {
                        col.1.push(source[j][row]);
                    }
                }
            }
        }
    }
    ds.with_columns(cols)
}

/// Bootstrap standard error for any scalar statistic of a dataset.
///
/// Replicates resample with replacement (units for panels, rows within time
/// strata for cross-sections) and re-run the full pipeline in `statistic`.
/// Failed replicates are dropped and counted; more than 10% failures aborts.
/// Returns (se, replicate values, failed count). Deterministic in the plan
/// seed: replicate r draws from a stream derived as (seed, r).
pub fn bootstrap_se<F>(ds: &Dataset, statistic: F, plan: &BootstrapPlan) -> Result<(f64, Vec<f64>, usize)>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    if plan.replications < 2 {
        return Err(Error::Replicates("bootstrap needs at least 2 replications".into()));
    }
    let scheme = plan.scheme.unwrap_or(match ds.layout {
        Layout::Panel => ResampleScheme::UnitResample,
        Layout::RepeatedCrossSection => ResampleScheme::StratifiedByT,
    });
    let results: Vec<Result<f64>> = (0..plan.replications)
        .into_par_iter()
        .map(|rep| {
            let rep_ds = resample(ds, scheme, derive_seed(plan.seed, rep as u64))?;
            statistic(&rep_ds)
        })
        .collect();
    let mut taus = Vec::with_capacity(plan.replications);
    let mut failed = 0usize;
    for r in results {
        match r {
            Ok(v) => taus.push(v),
            Err(_) => failed += 1,
        }
    }
    if failed * 10 > plan.replications {
        return Err(Error::Replicates(format!(
            "{failed} of {} bootstrap replicates failed",
            plan.replications
        )));
    }
    let m = taus.iter().sum::<f64>() / taus.len() as f64;
    let var = taus.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (taus.len() - 1) as f64;
    Ok((var.sqrt(), taus, failed))
}

// ---------------------------------------------------------------------------
// Analytic sandwich for the two-step estimators
// ---------------------------------------------------------------------------

/// First-stage influence pieces shared by the FD and POLS sandwiches.
struct FirstStageInfluence {
    /// gamma-block influence rows, n x p: row i holds (n * vcov * s_i)'
    /// restricted to the gamma coordinates.
    psi_gamma: DMatrix<f64>,
    /// Phi(R gamma_hat) per row.
    dhat: DVector<f64>,
    /// phi(R gamma_hat) per row.
    dens: DVector<f64>,
    /// Mean predicted probability (estimated treated share).
    p_hat: f64,
    /// Gradient of the estimated centering wrt gamma, k x p.
    grad_centering: DMatrix<f64>,
    /// Centered covariates (X minus estimated centering), n x k.
    xc: DMatrix<f64>,
    /// Raw first-stage rows (1, X), n x p.
    r_raw: DMatrix<f64>,
}

fn first_stage_influence(
    fit: &PopFit,
    r_raw: &DMatrix<f64>,
    z_raw: &DMatrix<f64>,
    d_obs: &DVector<f64>,
    dhat: &DVector<f64>,
    xc: &DMatrix<f64>,
) -> Result<FirstStageInfluence> {
    let n = r_raw.nrows();
    let p = fit.gamma.len();
    let vcov = fit
        .vcov
        .as_ref()
        .ok_or_else(|| Error::Estimation("analytic variance needs a first-stage covariance".into()))?;
    let scores = pop_score_rows(&fit.gamma, &fit.alpha, fit.rho, d_obs, r_raw, z_raw)?;
    let psi_full = scores * vcov.transpose() * (n as f64);
    let psi_gamma = DMatrix::from_fn(n, p, |i, j| psi_full[(i, j)]);
    let dens = {
        let idx = r_raw * &fit.gamma;
        DVector::from_fn(n, |i, _| norm_pdf(idx[i]))
    };
    let p_hat = dhat.sum() / n as f64;
    let k = xc.ncols();
    let mut grad_centering = DMatrix::zeros(k, p);
    for i in 0..n {
        for a in 0..k {
            let w = dens[i] * xc[(i, a)];
            for b in 0..p {
                grad_centering[(a, b)] += w * r_raw[(i, b)];
            }
        }
    }
    grad_centering /= p_hat * n as f64;
    Ok(FirstStageInfluence {
        psi_gamma,
        dhat: dhat.clone(),
        dens,
        p_hat,
        grad_centering,
        xc: xc.clone(),
        r_raw: r_raw.clone(),
    })
}

/// Per-observation influence columns for one (sub)sample regression:
/// level term + residual term + first-stage and centering corrections.
/// `gamma_rows` must be zero outside the subsample; the correction terms run
/// over every observation because the first stage is shared.
fn influence_columns(
    gamma_rows: &DMatrix<f64>,
    r_c: &DMatrix<f64>,
    slope_coef: &DVector<f64>,
    resid: &DVector<f64>,
    in_sub: &DVector<f64>,
    fsi: &FirstStageInfluence,
) -> DMatrix<f64> {
    let n = gamma_rows.nrows();
    let kp1 = gamma_rows.ncols();
    let p = fsi.psi_gamma.ncols();
    let k = fsi.xc.ncols();
    let kappa = DVector::from_fn(k, |j, _| slope_coef[j + 1]);
    let r_theta = r_c * slope_coef;

    // j_mat = -(1/n) sum_sub Gamma_i (r_c slope) dens_i Rraw_i'
    // c_vec =  (1/n) sum_sub Gamma_i dhat_i
    let mut j_mat = DMatrix::zeros(kp1, p);
    let mut c_vec = DVector::zeros(kp1);
    for i in 0..n {
        if in_sub[i] == 0.0 {
            continue;
        }
        let w = fsi.dens[i] * r_theta[i];
        for a in 0..kp1 {
            let g = gamma_rows[(i, a)];
            c_vec[a] += g * fsi.dhat[i];
            for b in 0..p {
                j_mat[(a, b)] -= g * w * fsi.r_raw[(i, b)];
            }
        }
    }
    let scale = 1.0 / n as f64;
    j_mat *= scale;
    c_vec *= scale;

    // m_mat = j_mat + c_vec (kappa' grad_centering)
    let mut kg = DVector::zeros(p);
    for b in 0..p {
        let mut acc = 0.0;
        for a in 0..k {
            acc += kappa[a] * fsi.grad_centering[(a, b)];
        }
        kg[b] = acc;
    }
    let mut m_mat = j_mat;
    for a in 0..kp1 {
        for b in 0..p {
            m_mat[(a, b)] += c_vec[a] * kg[b];
        }
    }

    // The centering error (R_ring - R_star) is a constant column shift, which
    // the residual maker annihilates exactly, so the level coefficients
    // contribute no sampling error; only the residual term enters.
    let mut out = DMatrix::zeros(n, kp1);
    for i in 0..n {
        if in_sub[i] == 1.0 {
            for a in 0..kp1 {
                out[(i, a)] += gamma_rows[(i, a)] * resid[i];
            }
        }
        let mut kx = 0.0;
        for j in 0..k {
            kx += kappa[j] * fsi.xc[(i, j)];
        }
        let centering_pull = kx * fsi.dhat[i] / fsi.p_hat;
        for a in 0..kp1 {
            let mut acc = c_vec[a] * centering_pull;
            for b in 0..p {
                acc += m_mat[(a, b)] * fsi.psi_gamma[(i, b)];
            }
            out[(i, a)] += acc;
        }
    }
    out
}

fn gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let g = m.transpose() * m;
    0.5 * (&g + g.transpose())
}

/// Sandwich covariance of the treatment block and the ATT standard error for
/// a fitted two-step FD run.
pub(crate) fn avar_fd_twostep(full: &TwostepFdFit) -> Result<(DMatrix<f64>, f64)> {
    let parts = &full.parts;
    let n = parts.n;
    let kp1 = parts.r_c.ncols();
    let gamma_rows = fw_residualize(&parts.w_c, &parts.r_c)?;
    let omega_gamma = gram(&gamma_rows) / n as f64;
    let og_inv = sym_inverse(&omega_gamma, "projected design second moment")?;

    let xc = DMatrix::from_fn(n, kp1 - 1, |i, j| parts.r_c[(i, j + 1)]);
    let fsi = first_stage_influence(&full.fit, &full.r_raw, &full.z_raw, &full.d_obs, &parts.weights, &xc)?;
    let ones = DVector::from_element(n, 1.0);
    let phi = influence_columns(&gamma_rows, &parts.r_c, &parts.theta, &parts.resid, &ones, &fsi);
    let meat = gram(&phi) / n as f64;
    let avar = &og_inv * meat * &og_inv;
    let avar = 0.5 * (&avar + avar.transpose());

    let se = project_att_se(&avar, parts)?;
    Ok((avar, se))
}

fn project_att_se(avar: &DMatrix<f64>, parts: &FdParts) -> Result<f64> {
    let n = parts.n;
    let kp1 = parts.r_c.ncols();
    let wsum: f64 = parts.weights.sum();
    let ell = DVector::from_fn(kp1, |j, _| {
        let mut acc = 0.0;
        for i in 0..n {
            acc += parts.weights[i] * parts.r_c[(i, j)];
        }
        acc / wsum
    });
    let var_tau = (ell.transpose() * avar * &ell)[(0, 0)] / n as f64;
    Ok(var_tau.max(0.0).sqrt())
}

/// Sandwich covariance and ATT standard error for a fitted two-step pooled
/// run. The coefficient equals the difference of the two subsample
/// regressions; the first stage and centering are shared, so their influence
/// enters both sides.
pub(crate) fn avar_pols_twostep(full: &TwostepPolsFit) -> Result<(DMatrix<f64>, f64)> {
    let parts = &full.parts;
    let n = parts.n;
    let kp1 = parts.r_c.ncols();

    let xc = DMatrix::from_fn(n, kp1 - 1, |i, j| parts.r_c[(i, j + 1)]);
    let fsi = first_stage_influence(&full.fit, &full.r_raw, &full.z_raw, &full.d_obs, &parts.weights, &xc)?;

    let mut phi_total = DMatrix::zeros(n, kp1);
    for (tval, sign) in [(1.0f64, 1.0f64), (0.0, -1.0)] {
        let in_sub = DVector::from_fn(n, |i, _| if parts.t[i] == tval { 1.0 } else { 0.0 });
        let rows: Vec<usize> = (0..n).filter(|&i| parts.t[i] == tval).collect();
        let r_sub = DMatrix::from_fn(rows.len(), kp1, |i, j| parts.r_c[(rows[i], j)]);
        let w_sub = DMatrix::from_fn(rows.len(), kp1, |i, j| parts.w_c[(rows[i], j)]);
        let g_sub = fw_residualize(&w_sub, &r_sub)?;
        let mut gamma_rows = DMatrix::zeros(n, kp1);
        for (ii, &i) in rows.iter().enumerate() {
            for j in 0..kp1 {
                gamma_rows[(i, j)] = g_sub[(ii, j)];
            }
        }
        let omega = gram(&gamma_rows) / n as f64;
        let om_inv = sym_inverse(&omega, "projected design second moment")?;

        // Subsample slope block: post has eta2 + theta, baseline has eta2.
        let slope = if tval == 1.0 { &parts.eta2 + &parts.theta } else { parts.eta2.clone() };
        let phi = influence_columns(&gamma_rows, &parts.r_c, &slope, &parts.resid, &in_sub, &fsi);
        let mapped = &om_inv * phi.transpose();
        for i in 0..n {
            for a in 0..kp1 {
                phi_total[(i, a)] += sign * mapped[(a, i)];
            }
        }
    }

    let avar = gram(&phi_total) / n as f64;
    let avar = 0.5 * (&avar + avar.transpose());
    let fd_view = FdParts {
        n,
        r_c: parts.r_c.clone(),
        w_c: parts.w_c.clone(),
        weights: parts.weights.clone(),
        delta: parts.delta.clone(),
        theta: parts.theta.clone(),
        resid: parts.resid.clone(),
        tau: parts.tau,
    };
    let se = project_att_se(&avar, &fd_view)?;
    Ok((avar, se))
}
