//! Partial observability probit first stage.
//!
//! Observed treatment follows `D = 1{R gamma + U >= 0} * 1{Z alpha + V >= 0}`
//! with (U, V) standard bivariate normal with correlation rho, so
//! `P(D = 1 | R, Z) = Phi2(R gamma, Z alpha; rho)`. Only the product event is
//! observed; the coefficients are identified when Z carries at least one
//! variable excluded from R. Maximum likelihood runs over (gamma, alpha,
//! atanh rho) so the correlation stays interior, with a short multi-start over
//! rho because likelihoods of this family can be multimodal. Predicted true
//! treatment probabilities are `Phi(R gamma_hat)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{first_difference, Dataset, Layout, Roles};
use crate::error::{Error, Result};
use crate::numerics::bfgs::{minimize, BfgsOptions};
use crate::numerics::normal::{bvn_cdf, bvn_pdf, norm_pdf, std_normal_cdf};

/// Probability clamp applied before taking logs.
const PROB_CLAMP: f64 = 1e-12;

/// Which rows a repeated-cross-section first stage is fitted on. Treatment,
/// covariates, and instruments are time-constant by assumption, so the pooled
/// sample is the default; baseline-only fitting is available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcsFirstStage {
    Pooled,
    BaselineOnly,
}

/// Column selection for the two first-stage indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopSpec {
    /// Covariates entering R after the intercept.
    pub covariates: Vec<String>,
    /// Covariates also entering Z (overlap with R is allowed but flagged).
    #[serde(default)]
    pub shared_in_z: Vec<String>,
    /// Excluded instruments entering only Z.
    pub instruments: Vec<String>,
}

impl PopSpec {
    /// Default specification from a dataset's roles: R = (1, covariates),
    /// Z = (1, instruments).
    pub fn from_roles(roles: &Roles) -> PopSpec {
        PopSpec {
            covariates: roles.covariates.clone(),
            shared_in_z: Vec::new(),
            instruments: roles.instruments.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.instruments.is_empty() {
            return Err(Error::Identification(
                "exclusion restriction not satisfied: Z needs at least one instrument excluded from R".into(),
            ));
        }
        for s in &self.shared_in_z {
            if !self.covariates.contains(s) {
                return Err(Error::Identification(format!(
                    "shared column '{s}' is not among the covariates"
                )));
            }
        }
        for inst in &self.instruments {
            if self.covariates.contains(inst) {
                return Err(Error::Identification(format!(
                    "instrument '{inst}' also appears in R; identification needs it excluded"
                )));
            }
        }
        Ok(())
    }
}

/// Solver options for the first stage.
#[derive(Debug, Clone)]
pub struct PopOptions {
    pub max_iter: usize,
    /// Gradient sup-norm tolerance.
    pub tol: f64,
    /// Initial correlations tried when no warm start is given.
    pub rho_starts: Vec<f64>,
    pub rcs_first_stage: RcsFirstStage,
    /// Full parameter vector (gamma, alpha, atanh rho) to start from; skips
    /// the multi-start. Used by bootstrap replicates.
    pub warm_start: Option<DVector<f64>>,
    /// Skip the numerically differentiated covariance (bootstrap replicates
    /// only need the point estimate).
    pub compute_vcov: bool,
}

impl Default for PopOptions {
    fn default() -> Self {
        PopOptions {
            max_iter: 500,
            tol: 1e-6,
            rho_starts: vec![-0.5, 0.0, 0.5],
            rcs_first_stage: RcsFirstStage::Pooled,
            warm_start: None,
            compute_vcov: true,
        }
    }
}

/// Diagnostics for one optimizer start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartDiag {
    pub rho0: f64,
    pub loglik0: f64,
    pub loglik: f64,
    pub converged: bool,
}

/// First-stage estimates.
#[derive(Debug, Clone)]
pub struct PopFit {
    pub gamma: DVector<f64>,
    pub alpha: DVector<f64>,
    pub rho: f64,
    pub loglik: f64,
    /// Covariance over (gamma, alpha, atanh rho) from the observed
    /// information (numerically differentiated analytic score).
    pub vcov: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
    pub starts: Vec<StartDiag>,
    pub notes: Vec<String>,
}

impl PopFit {
    /// Packed parameter vector (gamma, alpha, atanh rho).
    pub fn params(&self) -> DVector<f64> {
        let p = self.gamma.len();
        let q = self.alpha.len();
        let mut v = DVector::zeros(p + q + 1);
        v.rows_mut(0, p).copy_from(&self.gamma);
        v.rows_mut(p, q).copy_from(&self.alpha);
        v[p + q] = self.rho.atanh();
        v
    }

    /// Standard errors in (gamma, alpha, atanh rho) coordinates.
    pub fn se(&self) -> Option<DVector<f64>> {
        self.vcov.as_ref().map(|v| DVector::from_fn(v.nrows(), |i, _| v[(i, i)].max(0.0).sqrt()))
    }

    /// Delta-method standard error for rho itself.
    pub fn se_rho(&self) -> Option<f64> {
        self.se().map(|s| (1.0 - self.rho * self.rho) * s[s.len() - 1])
    }

    /// Wald statistic and p-value for rho = 0 (chi-squared with 1 df).
    pub fn wald_rho_zero(&self) -> Option<(f64, f64)> {
        let se = self.se()?;
        let se_w = se[se.len() - 1];
        if se_w <= 0.0 {
            return None;
        }
        let w = self.rho.atanh() / se_w;
        let stat = w * w;
        let p = 2.0 * std_normal_cdf(-stat.sqrt());
        Some((stat, p))
    }
}

fn check_dims(d: &DVector<f64>, r: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    if r.nrows() != d.len() || z.nrows() != d.len() {
        return Err(Error::Domain(format!(
            "conformability: D has {} rows, R {}, Z {}",
            d.len(),
            r.nrows(),
            z.nrows()
        )));
    }
    Ok(())
}

/// Log-likelihood of the partial observability probit at (gamma, alpha, rho).
pub fn pop_loglik(
    gamma: &DVector<f64>,
    alpha: &DVector<f64>,
    rho: f64,
    d: &DVector<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<f64> {
    check_dims(d, r, z)?;
    let mut params = DVector::zeros(gamma.len() + alpha.len() + 1);
    params.rows_mut(0, gamma.len()).copy_from(gamma);
    params.rows_mut(gamma.len(), alpha.len()).copy_from(alpha);
    params[gamma.len() + alpha.len()] = rho.atanh();
    if !params[gamma.len() + alpha.len()].is_finite() {
        return Err(Error::Domain(format!("rho {rho} out of (-1, 1)")));
    }
    let mut grad = DVector::zeros(params.len());
    Ok(loglik_grad(&params, d, r, z, &mut grad))
}

/// Analytic score in (gamma, alpha, atanh rho) coordinates.
pub fn pop_score(
    gamma: &DVector<f64>,
    alpha: &DVector<f64>,
    rho: f64,
    d: &DVector<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dims(d, r, z)?;
    let p = gamma.len();
    let q = alpha.len();
    let mut params = DVector::zeros(p + q + 1);
    params.rows_mut(0, p).copy_from(gamma);
    params.rows_mut(p, q).copy_from(alpha);
    params[p + q] = rho.atanh();
    if !params[p + q].is_finite() {
        return Err(Error::Domain(format!("rho {rho} out of (-1, 1)")));
    }
    let mut grad = DVector::zeros(p + q + 1);
    loglik_grad(&params, d, r, z, &mut grad);
    Ok(grad)
}

/// Log-likelihood and gradient in one pass over the data. `params` packs
/// (gamma, alpha, w) with rho = tanh(w).
fn loglik_grad(
    params: &DVector<f64>,
    d: &DVector<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
    grad: &mut DVector<f64>,
) -> f64 {
    let p = r.ncols();
    let q = z.ncols();
    let n = d.len();
    let gamma = params.rows(0, p);
    let alpha = params.rows(p, q);
    let w = params[p + q];
    let rho = w.tanh();
    // tanh keeps rho interior but can round to +-1 for large |w|.
    let rho = rho.clamp(-1.0 + 1e-10, 1.0 - 1e-10);
    let omr2 = (1.0 - rho) * (1.0 + rho);
    let somr2 = omr2.sqrt();

    let a = r * gamma;
    let b = z * alpha;
    let mut ca = DVector::zeros(n);
    let mut cb = DVector::zeros(n);
    let mut ll = 0.0;
    let mut gw = 0.0;
    for i in 0..n {
        let (ai, bi) = (a[i], b[i]);
        // bvn_cdf is infallible once rho is interior and a, b finite.
        let f = bvn_cdf(ai, bi, rho).unwrap_or(0.0);
        let fc = f.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let g = if d[i] == 1.0 { 1.0 / fc } else { -1.0 / (1.0 - fc) };
        ll += if d[i] == 1.0 { fc.ln() } else { (1.0 - fc).ln() };
        // dF/da = phi(a) Phi((b - rho a)/sqrt(1-rho^2)); symmetric for b.
        ca[i] = g * norm_pdf(ai) * std_normal_cdf((bi - rho * ai) / somr2);
        cb[i] = g * norm_pdf(bi) * std_normal_cdf((ai - rho * bi) / somr2);
        // dF/drho is the bivariate density; chain rule brings drho/dw = 1-rho^2.
        gw += g * bvn_pdf(ai, bi, rho) * omr2;
    }
    grad.rows_mut(0, p).copy_from(&(r.transpose() * &ca));
    grad.rows_mut(p, q).copy_from(&(z.transpose() * &cb));
    grad[p + q] = gw;
    ll
}

/// Per-observation score rows at (gamma, alpha, rho), n x (p + q + 1),
/// in (gamma, alpha, atanh rho) coordinates. Used by the sandwich variance.
pub fn pop_score_rows(
    gamma: &DVector<f64>,
    alpha: &DVector<f64>,
    rho: f64,
    d: &DVector<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(d, r, z)?;
    let p = r.ncols();
    let q = z.ncols();
    let n = d.len();
    let rho = rho.clamp(-1.0 + 1e-10, 1.0 - 1e-10);
    let omr2 = (1.0 - rho) * (1.0 + rho);
    let somr2 = omr2.sqrt();
    let a = r * gamma;
    let b = z * alpha;
    let mut rows = DMatrix::zeros(n, p + q + 1);
    for i in 0..n {
        let (ai, bi) = (a[i], b[i]);
        let f = bvn_cdf(ai, bi, rho)?;
        let fc = f.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let g = if d[i] == 1.0 { 1.0 / fc } else { -1.0 / (1.0 - fc) };
        let ca = g * norm_pdf(ai) * std_normal_cdf((bi - rho * ai) / somr2);
        let cb = g * norm_pdf(bi) * std_normal_cdf((ai - rho * bi) / somr2);
        for j in 0..p {
            rows[(i, j)] = ca * r[(i, j)];
        }
        for j in 0..q {
            rows[(i, p + j)] = cb * z[(i, j)];
        }
        rows[(i, p + q)] = g * bvn_pdf(ai, bi, rho) * omr2;
    }
    Ok(rows)
}

/// Plain probit MLE via Newton steps on the expected information.
/// Returns coefficients and their covariance.
pub fn probit_fit(d: &DVector<f64>, x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let k = x.ncols();
    if d.len() != n {
        return Err(Error::Domain("probit dimensions".into()));
    }
    let mut beta = DVector::zeros(k);
    for _ in 0..100 {
        let xb = x * &beta;
        let mut lam = DVector::zeros(n);
        let mut wts = DVector::zeros(n);
        for i in 0..n {
            let p = std_normal_cdf(xb[i]).clamp(1e-10, 1.0 - 1e-10);
            let f = norm_pdf(xb[i]);
            lam[i] = (d[i] - p) * f / (p * (1.0 - p));
            wts[i] = f * f / (p * (1.0 - p));
        }
        let score = x.transpose() * &lam;
        let mut info = DMatrix::zeros(k, k);
        for i in 0..n {
            for a in 0..k {
                for b in a..k {
                    info[(a, b)] += wts[i] * x[(i, a)] * x[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let step = info
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Estimation("singular probit information".into()))?
            * &score;
        beta += &step;
        if score.amax() < 1e-8 || step.amax() < 1e-10 {
            let vcov = info.try_inverse().ok_or_else(|| Error::Estimation("singular probit information".into()))?;
            return Ok((beta, vcov));
        }
    }
    // Good enough for a warm start even without full convergence.
    let vcov = DMatrix::identity(k, k);
    Ok((beta, vcov))
}

/// Design matrices used by the first stage.
pub struct PopDesign {
    pub d: DVector<f64>,
    /// Intercept plus covariates.
    pub r: DMatrix<f64>,
    /// Intercept plus shared covariates plus excluded instruments.
    pub z: DMatrix<f64>,
}

/// Assemble (D, R, Z) from a dataset for the given specification.
pub fn pop_design(dataset: &Dataset, spec: &PopSpec, rcs_mode: RcsFirstStage) -> Result<PopDesign> {
    spec.validate()?;
    let (d, x, z_excl) = match dataset.layout {
        Layout::Panel => {
            let fd = first_difference(dataset)?;
            let x = dataset_submatrix(&fd.x, &dataset.roles.covariates, &spec.covariates)?;
            (fd.d, x, fd.z)
        }
        Layout::RepeatedCrossSection => {
            let rows: Option<Vec<usize>> = match rcs_mode {
                RcsFirstStage::Pooled => None,
                RcsFirstStage::BaselineOnly => {
                    let t = dataset.column(&dataset.roles.time)?;
                    Some((0..dataset.n_rows()).filter(|&i| t[i] == 0.0).collect())
                }
            };
            let rows_ref = rows.as_deref();
            let d = DVector::from_column_slice(
                dataset
                    .matrix_of(std::slice::from_ref(&dataset.roles.treatment), rows_ref)?
                    .column(0)
                    .as_slice(),
            );
            let x = dataset.matrix_of(&spec.covariates, rows_ref)?;
            let z = dataset.matrix_of(&spec.instruments, rows_ref)?;
            (d, x, z)
        }
    };
    let n = d.len();
    let shared = {
        // Columns of X shared into Z, pulled by name from the spec covariate order.
        let mut m = DMatrix::zeros(n, spec.shared_in_z.len());
        for (jj, name) in spec.shared_in_z.iter().enumerate() {
            let j = spec
                .covariates
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Identification(format!("shared column '{name}' not in covariates")))?;
            for i in 0..n {
                m[(i, jj)] = x[(i, j)];
            }
        }
        m
    };
    let r = with_intercept(&x);
    let z = {
        let mut z = DMatrix::zeros(n, 1 + shared.ncols() + z_excl.ncols());
        for i in 0..n {
            z[(i, 0)] = 1.0;
            for j in 0..shared.ncols() {
                z[(i, 1 + j)] = shared[(i, j)];
            }
            for j in 0..z_excl.ncols() {
                z[(i, 1 + shared.ncols() + j)] = z_excl[(i, j)];
            }
        }
        z
    };
    Ok(PopDesign { d, r, z })
}

fn dataset_submatrix(x: &DMatrix<f64>, have: &[String], want: &[String]) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(x.nrows(), want.len());
    for (jj, name) in want.iter().enumerate() {
        let j = have
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Identification(format!("column '{name}' not among dataset covariates")))?;
        for i in 0..x.nrows() {
            out[(i, jj)] = x[(i, j)];
        }
    }
    Ok(out)
}

/// Prepend a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Fit the first stage on a dataset.
pub fn pop_fit(dataset: &Dataset, spec: &PopSpec, opts: &PopOptions) -> Result<PopFit> {
    let design = pop_design(dataset, spec, opts.rcs_first_stage)?;
    let mut fit = pop_fit_matrices(&design.d, &design.r, &design.z, opts)?;
    if !spec.shared_in_z.is_empty() {
        fit.notes.push(format!(
            "Z shares covariates with R: {:?}; identification rests on the excluded instruments {:?}",
            spec.shared_in_z, spec.instruments
        ));
    }
    Ok(fit)
}

/// Fit the first stage from raw matrices. `r` and `z` must already carry
/// intercept columns; callers are responsible for the exclusion restriction.
pub fn pop_fit_matrices(
    d: &DVector<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
    opts: &PopOptions,
) -> Result<PopFit> {
    check_dims(d, r, z)?;
    let n = d.len();
    let n1 = d.iter().filter(|&&v| v == 1.0).count();
    if n1 == 0 || n1 == n {
        return Err(Error::Identification("observed treatment is constant".into()));
    }
    // Collinear indices make the likelihood flat along a ray; reject early.
    rank_check(r, "R")?;
    rank_check(z, "Z")?;

    let p = r.ncols();
    let q = z.ncols();
    let dim = p + q + 1;

    let starts: Vec<DVector<f64>> = if let Some(ws) = &opts.warm_start {
        if ws.len() != dim {
            return Err(Error::Domain(format!("warm start has {} entries, expected {dim}", ws.len())));
        }
        vec![ws.clone()]
    } else {
        let (g0, _) = probit_fit(d, r)?;
        let (a0, _) = probit_fit(d, z)?;
        opts.rho_starts
            .iter()
            .map(|&rho0| {
                let mut v = DVector::zeros(dim);
                v.rows_mut(0, p).copy_from(&g0);
                v.rows_mut(p, q).copy_from(&a0);
                v[dim - 1] = rho0.atanh();
                v
            })
            .collect()
    };

    let bopts = BfgsOptions { tol: opts.tol, max_iter: opts.max_iter };
    // Optimize the mean log-likelihood so the objective scale, and with it the
    // gradient tolerance, does not grow with the sample size.
    let scale = 1.0 / n as f64;
    let mut best: Option<(f64, nalgebra::DVector<f64>, usize, bool)> = None;
    let mut diags = Vec::with_capacity(starts.len());
    for start in starts {
        let mut g0 = DVector::zeros(dim);
        let ll0 = loglik_grad(&start, d, r, z, &mut g0);
        let out = minimize(
            |x, g| {
                let ll = loglik_grad(x, d, r, z, g);
                g.neg_mut();
                *g *= scale;
                -ll * scale
            },
            start.clone(),
            &bopts,
        );
        let ll = -out.value / scale;
        diags.push(StartDiag {
            rho0: start[dim - 1].tanh(),
            loglik0: ll0,
            loglik: ll,
            converged: out.converged,
        });
        let better = match &best {
            None => true,
            Some((bll, ..)) => ll > *bll,
        };
        if better {
            best = Some((ll, out.x, out.iterations, out.converged));
        }
    }
    let (loglik, params, iterations, converged) = best.expect("at least one start");

    let gamma = DVector::from(params.rows(0, p));
    let alpha = DVector::from(params.rows(p, q));
    let w = params[dim - 1];
    let rho = w.tanh();

    let mut notes = Vec::new();
    if !converged {
        notes.push(format!(
            "gradient tolerance {:.1e} not reached within {} iterations",
            opts.tol, opts.max_iter
        ));
    }
    let vcov = if converged && opts.compute_vcov {
        match observed_info_vcov(&params, d, r, z) {
            Ok((v, dropped)) => {
                if dropped > 0 {
                    notes.push(format!(
                        "observed information is singular along {dropped} direction(s); \
                         the covariance is a pseudo-inverse and the affected standard errors read as zero"
                    ));
                }
                Some(v)
            }
            Err(e) => {
                notes.push(format!("covariance unavailable: {e}"));
                None
            }
        }
    } else {
        None
    };

    Ok(PopFit {
        gamma,
        alpha,
        rho,
        loglik,
        vcov,
        converged,
        iterations,
        n_obs: n,
        starts: diags,
        notes,
    })
}

fn rank_check(m: &DMatrix<f64>, what: &str) -> Result<()> {
    crate::numerics::linalg::fw_residualize(&DMatrix::zeros(m.nrows(), 1), m)
        .map(|_| ())
        .map_err(|e| Error::Identification(format!("{what} fails the rank check: {e}")))
}

/// Covariance from the observed information: central differences of the
/// analytic score, inverted on the identified subspace.
///
/// Eigendirections whose curvature is negligible (or wrong-signed, which can
/// happen when a boundary-flat direction leaves no information) are dropped;
/// their count is returned so callers can flag the fit. On a boundary-free
/// fit nothing is dropped and this is the plain inverse.
fn observed_info_vcov(
    params: &DVector<f64>,
    d: &DVector<f64>,
    r: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, usize)> {
    let dim = params.len();
    let mut hess = DMatrix::zeros(dim, dim);
    let mut gp = DVector::zeros(dim);
    let mut gm = DVector::zeros(dim);
    for j in 0..dim {
        let h = 1e-5 * (1.0 + params[j].abs());
        let mut xp = params.clone();
        xp[j] += h;
        let mut xm = params.clone();
        xm[j] -= h;
        loglik_grad(&xp, d, r, z, &mut gp);
        loglik_grad(&xm, d, r, z, &mut gm);
        for i in 0..dim {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let neg_h = -0.5 * (&hess + hess.transpose());
    let eig = nalgebra::SymmetricEigen::new(neg_h);
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    if !(max_ev > 0.0) {
        return Err(Error::NonConvergence("observed information has no positive curvature".into()));
    }
    let tol = 1e-10 * max_ev;
    let mut dropped = 0usize;
    let mut vcov = DMatrix::zeros(dim, dim);
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(j);
            vcov += (&v * v.transpose()) / ev;
        } else {
            dropped += 1;
        }
    }
    let vcov = 0.5 * (&vcov + vcov.transpose());
    Ok((vcov, dropped))
}

/// Predicted true-treatment probabilities `Phi(R gamma_hat)`.
pub fn predict_dstar(fit: &PopFit, r: &DMatrix<f64>) -> Result<DVector<f64>> {
    if !fit.converged {
        return Err(Error::NonConvergence(
            "first stage did not converge; refusing to predict treatment probabilities".into(),
        ));
    }
    if r.ncols() != fit.gamma.len() {
        return Err(Error::Domain(format!(
            "R has {} columns but gamma has {}",
            r.ncols(),
            fit.gamma.len()
        )));
    }
    let idx = r * &fit.gamma;
    Ok(idx.map(std_normal_cdf))
}
