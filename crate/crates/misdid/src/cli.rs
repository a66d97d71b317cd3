//! Command-line front end: `pop-fit`, `estimate`, `simulate`, `decompose`.
//!
//! Every command reads its parameters from flags, optionally seeded by a TOML
//! run-configuration file (`--config`); explicit flags win over file values.
//! Reports are JSON (schema-versioned, see `schemas/`) with a provenance
//! block carrying the seed, a SHA-256 hash over the configuration files read,
//! and the crate version, so a report can be traced to its inputs. Outputs
//! contain no timestamps: the same inputs and seed produce byte-identical
//! files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias_lab::{
    decompose_did, joint_from_dgp, monte_carlo, prop1_predict, simple_did_bias, theorem1_bias_fd,
    theorem1_bias_pols, DecompositionReport, DgpConfig, DiscreteJoint, McConfig, McReport,
};
use crate::data::{Dataset, Layout, Roles};
use crate::error::{Error, Result};
use crate::estimators::{BootstrapPlan, DidEstimate, Method, SeMode, SeSource};
use crate::pop::{pop_fit, PopFit, PopOptions, PopSpec, RcsFirstStage, StartDiag};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Parser, Debug)]
#[command(name = "misdid", version, about = "ATT estimation in 2x2 designs with a misclassified treatment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the partial observability probit first stage.
    #[command(name = "pop-fit")]
    PopFit(PopFitArgs),
    /// Run ATT estimators on a dataset.
    Estimate(EstimateArgs),
    /// Monte Carlo study on a generative configuration.
    Simulate(SimulateArgs),
    /// Decompose the DID estimand for a joint law or a generative configuration.
    Decompose(DecomposeArgs),
}

/// Run the CLI and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PopFit(a) => cmd_pop_fit(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Decompose(a) => cmd_decompose(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 over the configuration files read, in command-line order.
    pub config_hash: String,
    pub version: String,
}

struct ConfigHasher {
    hasher: Sha256,
}

impl ConfigHasher {
    fn new() -> Self {
        ConfigHasher { hasher: Sha256::new() }
    }

    fn read(&mut self, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        self.hasher.update(text.as_bytes());
        Ok(text)
    }

    fn touch(&mut self, path: &Path) -> Result<()> {
        self.read(path).map(|_| ())
    }

    fn provenance(self, seed: u64) -> Provenance {
        Provenance {
            seed,
            config_hash: format!("{:x}", self.hasher.finalize()),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Estimation(format!("report serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Ingestion(format!("cannot write {}: {e}", path.display())))
}

fn set_jobs(jobs: Option<usize>) {
    if let Some(j) = jobs {
        // Ignore failures: the pool may already be initialized (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
}

fn parse_se(name: &str) -> Result<SeMode> {
    match name {
        "bootstrap" => Ok(SeMode::DefaultBootstrap),
        "analytic" => Ok(SeMode::Analytic),
        "none" => Ok(SeMode::Skip),
        other => Err(Error::Ingestion(format!("unknown se mode '{other}' (expected bootstrap|analytic|none)"))),
    }
}

fn merge<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

// ---------------------------------------------------------------------------
// pop-fit
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default)]
pub struct PopFitArgs {
    /// TOML run-configuration; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Roles TOML mapping columns.
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Output JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Fit the first stage of a repeated cross-section on baseline rows only.
    #[arg(long)]
    pub baseline_first_stage: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopFitFile {
    input: Option<PathBuf>,
    roles: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    baseline_first_stage: Option<bool>,
    jobs: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaldTest {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopFitReport {
    pub schema_version: String,
    pub command: String,
    pub provenance: Provenance,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
    pub loglik: f64,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub se_gamma: Option<Vec<f64>>,
    pub se_alpha: Option<Vec<f64>>,
    pub se_rho: Option<f64>,
    pub wald_rho_zero: Option<WaldTest>,
    pub starts: Vec<StartDiag>,
    pub notes: Vec<String>,
}

pub fn pop_fit_report(fit: &PopFit, provenance: Provenance) -> PopFitReport {
    let se = fit.se();
    let p = fit.gamma.len();
    let q = fit.alpha.len();
    PopFitReport {
        schema_version: SCHEMA_VERSION.into(),
        command: "pop-fit".into(),
        provenance,
        converged: fit.converged,
        iterations: fit.iterations,
        n_obs: fit.n_obs,
        loglik: fit.loglik,
        gamma: fit.gamma.iter().copied().collect(),
        alpha: fit.alpha.iter().copied().collect(),
        rho: fit.rho,
        se_gamma: se.as_ref().map(|s| s.rows(0, p).iter().copied().collect()),
        se_alpha: se.as_ref().map(|s| s.rows(p, q).iter().copied().collect()),
        se_rho: fit.se_rho(),
        wald_rho_zero: fit.wald_rho_zero().map(|(statistic, p_value)| WaldTest { statistic, p_value }),
        starts: fit.starts.clone(),
        notes: fit.notes.clone(),
    }
}

fn cmd_pop_fit(args: PopFitArgs) -> Result<()> {
    let mut hasher = ConfigHasher::new();
    let file: PopFitFile = match &args.config {
        Some(p) => toml::from_str(&hasher.read(p)?)
            .map_err(|e| Error::Ingestion(format!("run config {}: {e}", p.display())))?,
        None => PopFitFile::default(),
    };
    let input = merge(args.input, file.input)
        .ok_or_else(|| Error::Ingestion("pop-fit needs --input".into()))?;
    let roles_path = merge(args.roles, file.roles)
        .ok_or_else(|| Error::Ingestion("pop-fit needs --roles".into()))?;
    let out = merge(args.out, file.out).ok_or_else(|| Error::Ingestion("pop-fit needs --out".into()))?;
    let seed = merge(args.seed, file.seed).unwrap_or(0);
    set_jobs(merge(args.jobs, file.jobs));

    hasher.touch(&roles_path)?;
    let roles = Roles::from_path(&roles_path)?;
    let dataset = Dataset::ingest_csv(&input, roles)?;
    let spec = PopSpec::from_roles(&dataset.roles);
    let opts = PopOptions {
        tol: merge(args.tol, file.tol).unwrap_or(1e-6),
        max_iter: merge(args.max_iter, file.max_iter).unwrap_or(500),
        rcs_first_stage: if args.baseline_first_stage || file.baseline_first_stage == Some(true) {
            RcsFirstStage::BaselineOnly
        } else {
            RcsFirstStage::Pooled
        },
        ..Default::default()
    };
    let fit = pop_fit(&dataset, &spec, &opts)?;
    let report = pop_fit_report(&fit, hasher.provenance(seed));
    write_json(&out, &report)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "first stage did not converge after {} iterations (report written to {})",
            fit.iterations,
            out.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated estimator list, e.g. naive-fd,twostep-fd.
    #[arg(long)]
    pub estimators: Option<String>,
    /// Standard errors: bootstrap | analytic | none.
    #[arg(long)]
    pub se: Option<String>,
    /// Bootstrap replications.
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub baseline_first_stage: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateFile {
    input: Option<PathBuf>,
    roles: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    estimators: Option<Vec<String>>,
    se: Option<String>,
    boot: Option<usize>,
    baseline_first_stage: Option<bool>,
    jobs: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstStageBlock {
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootBlock {
    pub replications: usize,
    pub used: usize,
    pub failed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRow {
    pub method: String,
    pub tau: f64,
    pub se: Option<f64>,
    pub se_source: Option<String>,
    pub theta: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub eta1: Option<Vec<f64>>,
    pub eta2: Option<Vec<f64>>,
    pub first_stage: Option<FirstStageBlock>,
    pub boot: Option<BootBlock>,
    pub n_obs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateReport {
    pub schema_version: String,
    pub command: String,
    pub provenance: Provenance,
    pub layout: Layout,
    pub estimates: Vec<EstimateRow>,
}

pub fn estimate_row(est: &DidEstimate) -> EstimateRow {
    EstimateRow {
        method: est.method.label().to_string(),
        tau: est.tau_att,
        se: est.se_tau,
        se_source: est.se_source.map(|s| match s {
            SeSource::Analytic => "analytic".to_string(),
            SeSource::Bootstrap => "bootstrap".to_string(),
        }),
        theta: est.theta.iter().copied().collect(),
        delta: est.nuisance.delta.as_ref().map(|v| v.iter().copied().collect()),
        eta1: est.nuisance.eta1.as_ref().map(|v| v.iter().copied().collect()),
        eta2: est.nuisance.eta2.as_ref().map(|v| v.iter().copied().collect()),
        first_stage: est.first_stage.as_ref().map(|f| FirstStageBlock {
            gamma: f.gamma.iter().copied().collect(),
            alpha: f.alpha.iter().copied().collect(),
            rho: f.rho,
            loglik: f.loglik,
            converged: f.converged,
        }),
        boot: est.boot.as_ref().map(|b| BootBlock {
            replications: b.replications,
            used: b.used,
            failed: b.failed,
        }),
        n_obs: est.n_obs,
    }
}

fn default_methods(ds: &Dataset) -> Vec<Method> {
    let mut methods = match ds.layout {
        Layout::Panel => vec![Method::NaiveFd, Method::TwostepFd],
        Layout::RepeatedCrossSection => vec![Method::NaivePols, Method::TwostepPols],
    };
    if ds.roles.true_treatment.is_some() {
        methods.push(match ds.layout {
            Layout::Panel => Method::InfeasibleFd,
            Layout::RepeatedCrossSection => Method::InfeasiblePols,
        });
    }
    methods
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let mut hasher = ConfigHasher::new();
    let file: EstimateFile = match &args.config {
        Some(p) => toml::from_str(&hasher.read(p)?)
            .map_err(|e| Error::Ingestion(format!("run config {}: {e}", p.display())))?,
        None => EstimateFile::default(),
    };
    let input = merge(args.input, file.input)
        .ok_or_else(|| Error::Ingestion("estimate needs --input".into()))?;
    let roles_path = merge(args.roles, file.roles)
        .ok_or_else(|| Error::Ingestion("estimate needs --roles".into()))?;
    let out = merge(args.out, file.out).ok_or_else(|| Error::Ingestion("estimate needs --out".into()))?;
    let seed = merge(args.seed, file.seed).unwrap_or(0);
    set_jobs(merge(args.jobs, file.jobs));

    hasher.touch(&roles_path)?;
    let roles = Roles::from_path(&roles_path)?;
    let dataset = Dataset::ingest_csv(&input, roles)?;
    let methods: Vec<Method> = match merge(
        args.estimators.map(|s| s.split(',').map(str::to_owned).collect::<Vec<_>>()),
        file.estimators,
    ) {
        Some(names) => names.iter().map(|n| Method::parse(n.trim())).collect::<Result<_>>()?,
        None => default_methods(&dataset),
    };
    let se = parse_se(&merge(args.se, file.se).unwrap_or_else(|| "bootstrap".into()))?;
    let boot = merge(args.boot, file.boot).unwrap_or(200);
    let se = match se {
        SeMode::DefaultBootstrap => SeMode::Bootstrap(BootstrapPlan { replications: boot, seed, scheme: None }),
        other => other,
    };
    let opts = crate::estimators::EstimatorOptions {
        se,
        pop: PopOptions {
            rcs_first_stage: if args.baseline_first_stage || file.baseline_first_stage == Some(true) {
                RcsFirstStage::BaselineOnly
            } else {
                RcsFirstStage::Pooled
            },
            ..Default::default()
        },
    };
    let spec = PopSpec::from_roles(&dataset.roles);
    let mut rows = Vec::new();
    for method in methods {
        let est = crate::bias_lab::run_estimator(method, &dataset, &spec, &opts)?;
        rows.push(estimate_row(&est));
    }
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION.into(),
        command: "estimate".into(),
        provenance: hasher.provenance(seed),
        layout: dataset.layout,
        estimates: rows,
    };
    write_json(&out, &report)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generative configuration (TOML).
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    /// Output prefix; writes <prefix>.json and <prefix>.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// panel | rcs.
    #[arg(long)]
    pub layout: Option<String>,
    /// Units (panel) or rows (rcs) per replicate.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub estimators: Option<String>,
    /// Standard errors: bootstrap | analytic | none.
    #[arg(long)]
    pub se: Option<String>,
    #[arg(long)]
    pub boot: Option<usize>,
    /// Also write replicate 0's dataset to this CSV path (a sibling
    /// .roles.toml documents its columns).
    #[arg(long)]
    pub dump_replicate: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    dgp: Option<PathBuf>,
    out: Option<PathBuf>,
    layout: Option<String>,
    n: Option<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
    estimators: Option<Vec<String>>,
    se: Option<String>,
    boot: Option<usize>,
    dump_replicate: Option<PathBuf>,
    jobs: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateReport {
    pub schema_version: String,
    pub command: String,
    pub provenance: Provenance,
    pub report: McReport,
}

/// One CSV row per estimator; coverage and mean_se are blank when standard
/// errors were not requested.
pub fn mc_report_csv(report: &McReport) -> String {
    let mut out = String::from("estimator,mean_tau,bias,sd,mcse,rmse,coverage,mean_se,reps_used\n");
    for e in &report.entries {
        let cov = e.coverage.map(|c| c.to_string()).unwrap_or_default();
        let mse = e.mean_se.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.method.label(),
            e.mean_tau,
            e.bias,
            e.sd,
            e.mcse,
            e.rmse,
            cov,
            mse,
            e.reps_used
        ));
    }
    out
}

fn parse_layout(name: &str) -> Result<Layout> {
    match name {
        "panel" => Ok(Layout::Panel),
        "rcs" | "repeated_cross_section" => Ok(Layout::RepeatedCrossSection),
        other => Err(Error::Ingestion(format!("unknown layout '{other}' (expected panel|rcs)"))),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut hasher = ConfigHasher::new();
    let file: SimulateFile = match &args.config {
        Some(p) => toml::from_str(&hasher.read(p)?)
            .map_err(|e| Error::Ingestion(format!("run config {}: {e}", p.display())))?,
        None => SimulateFile::default(),
    };
    let dgp_path = merge(args.dgp, file.dgp).ok_or_else(|| Error::Ingestion("simulate needs --dgp".into()))?;
    let out = merge(args.out, file.out).ok_or_else(|| Error::Ingestion("simulate needs --out".into()))?;
    let layout = parse_layout(&merge(args.layout, file.layout).unwrap_or_else(|| "panel".into()))?;
    let n = merge(args.n, file.n).unwrap_or(2000);
    let reps = merge(args.reps, file.reps).unwrap_or(100);
    let seed = merge(args.seed, file.seed).unwrap_or(0);
    set_jobs(merge(args.jobs, file.jobs));

    hasher.touch(&dgp_path)?;
    let dgp = DgpConfig::from_path(&dgp_path)?;
    let methods: Vec<Method> = match merge(
        args.estimators.map(|s| s.split(',').map(str::to_owned).collect::<Vec<_>>()),
        file.estimators,
    ) {
        Some(names) => names.iter().map(|n| Method::parse(n.trim())).collect::<Result<_>>()?,
        None => match layout {
            Layout::Panel => vec![Method::NaiveFd, Method::TwostepFd, Method::InfeasibleFd],
            Layout::RepeatedCrossSection => {
                vec![Method::NaivePols, Method::TwostepPols, Method::InfeasiblePols]
            }
        },
    };
    let se = parse_se(&merge(args.se, file.se).unwrap_or_else(|| "none".into()))?;
    let se = match se {
        SeMode::DefaultBootstrap => SeMode::Bootstrap(BootstrapPlan {
            replications: merge(args.boot, file.boot).unwrap_or(200),
            seed: 0,
            scheme: None,
        }),
        other => other,
    };

    let mc = McConfig { layout, methods, n, reps, seed, se };
    let report = monte_carlo(&dgp, &mc)?;

    if let Some(dump) = merge(args.dump_replicate, file.dump_replicate) {
        let ds = match layout {
            Layout::Panel => crate::bias_lab::simulate_panel(&dgp, n, crate::numerics::derive_seed(seed, 0))?,
            Layout::RepeatedCrossSection => {
                crate::bias_lab::simulate_rcs(&dgp, n, crate::numerics::derive_seed(seed, 0))?
            }
        };
        let mut buf = Vec::new();
        ds.emit_csv(&mut buf)?;
        std::fs::write(&dump, &buf)
            .map_err(|e| Error::Ingestion(format!("cannot write {}: {e}", dump.display())))?;
        let roles_text = toml::to_string(&ds.roles)
            .map_err(|e| Error::Estimation(format!("roles serialization: {e}")))?;
        std::fs::write(dump.with_extension("roles.toml"), roles_text)
            .map_err(|e| Error::Ingestion(format!("cannot write roles: {e}")))?;
    }

    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    let sim_report = SimulateReport {
        schema_version: SCHEMA_VERSION.into(),
        command: "simulate".into(),
        provenance: hasher.provenance(seed),
        report,
    };
    write_json(&json_path, &sim_report)?;
    std::fs::write(&csv_path, mc_report_csv(&sim_report.report))
        .map_err(|e| Error::Ingestion(format!("cannot write {}: {e}", csv_path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Joint law over (D, D*) with cell means (TOML).
    #[arg(long)]
    pub joint: Option<PathBuf>,
    /// Generative configuration; its implied joint law is simulated.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Draws for plug-in moments and the implied joint law.
    #[arg(long)]
    pub moment_sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecomposeFile {
    joint: Option<PathBuf>,
    dgp: Option<PathBuf>,
    out: Option<PathBuf>,
    moment_sample: Option<usize>,
    seed: Option<u64>,
    jobs: Option<usize>,
}

/// TOML shape of a joint law: three 2x2 tables keyed by recorded treatment.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    prob: JointRows,
    effect_mean: JointRows,
    trend_mean: JointRows,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRows {
    /// Values for D = 0 as [D* = 0, D* = 1].
    d0: [f64; 2],
    /// Values for D = 1 as [D* = 0, D* = 1].
    d1: [f64; 2],
}

impl JointFile {
    fn into_joint(self) -> DiscreteJoint {
        DiscreteJoint {
            prob: [self.prob.d0, self.prob.d1],
            effect_mean: [self.effect_mean.d0, self.effect_mean.d1],
            trend_mean: [self.trend_mean.d0, self.trend_mean.d1],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Block {
    pub effect_recorded_treated_pred: f64,
    pub trend_gap_recorded_pred: f64,
    /// Whether the exact decomposition matches the predictions (within tol);
    /// disagreement indicates differential misclassification.
    pub effect_agrees: bool,
    pub trend_agrees: bool,
    pub tolerance: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem1Block {
    pub fd_bias: f64,
    pub pols_bias: f64,
    /// Closed-form bias of the no-covariate design, when k = 0.
    pub simple_bias: Option<f64>,
    pub moment_sample: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeReport {
    pub schema_version: String,
    pub command: String,
    pub provenance: Provenance,
    pub decomposition: DecompositionReport,
    pub prop1: Prop1Block,
    pub theorem1: Option<Theorem1Block>,
}

fn cmd_decompose(args: DecomposeArgs) -> Result<()> {
    let mut hasher = ConfigHasher::new();
    let file: DecomposeFile = match &args.config {
        Some(p) => toml::from_str(&hasher.read(p)?)
            .map_err(|e| Error::Ingestion(format!("run config {}: {e}", p.display())))?,
        None => DecomposeFile::default(),
    };
    let out = merge(args.out, file.out).ok_or_else(|| Error::Ingestion("decompose needs --out".into()))?;
    let seed = merge(args.seed, file.seed).unwrap_or(0);
    let moment_sample = merge(args.moment_sample, file.moment_sample).unwrap_or(1_000_000);
    set_jobs(merge(args.jobs, file.jobs));
    let joint_path = merge(args.joint, file.joint);
    let dgp_path = merge(args.dgp, file.dgp);

    let (joint, theorem1) = match (joint_path, dgp_path) {
        (Some(jp), None) => {
            let jf: JointFile = toml::from_str(&hasher.read(&jp)?)
                .map_err(|e| Error::Ingestion(format!("joint file {}: {e}", jp.display())))?;
            (jf.into_joint(), None)
        }
        (None, Some(dp)) => {
            hasher.touch(&dp)?;
            let dgp = DgpConfig::from_path(&dp)?;
            let joint = joint_from_dgp(&dgp, moment_sample)?;
            let fd_bias = theorem1_bias_fd(&dgp, moment_sample)?;
            let pols_bias = theorem1_bias_pols(&dgp, moment_sample)?;
            let simple_bias = if dgp.k == 0 { Some(simple_did_bias(&dgp)?) } else { None };
            (joint, Some(Theorem1Block { fd_bias, pols_bias, simple_bias, moment_sample }))
        }
        _ => {
            return Err(Error::Ingestion(
                "decompose needs exactly one of --joint or --dgp".into(),
            ))
        }
    };

    let decomposition = decompose_did(&joint)?;
    let (p1, p2) = prop1_predict(
        decomposition.att,
        decomposition.atu,
        decomposition.q1,
        decomposition.q0,
        decomposition.trend_gap_true,
    );
    let tolerance = 1e-9;
    let prop1 = Prop1Block {
        effect_recorded_treated_pred: p1,
        trend_gap_recorded_pred: p2,
        effect_agrees: (p1 - decomposition.effect_recorded_treated).abs() <= tolerance,
        trend_agrees: (p2 - decomposition.trend_gap_recorded).abs() <= tolerance,
        tolerance,
    };
    let report = DecomposeReport {
        schema_version: SCHEMA_VERSION.into(),
        command: "decompose".into(),
        provenance: hasher.provenance(seed),
        decomposition,
        prop1,
        theorem1,
    };
    write_json(&out, &report)
}
