//! End-to-end checks of the `misdid` binary: report schemas, exit codes, and
//! flag/config handling. Byte-level determinism across reruns is exercised by
//! the acceptance suite.

use std::path::{Path, PathBuf};
use std::process::Command;

use misdid::bias_lab::DgpConfig;
use misdid::cli::{DecomposeReport, EstimateReport, PopFitReport};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_misdid")
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().expect("tempdir") }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn write_benchmark_panel(&self, n: usize, seed: u64) -> (PathBuf, PathBuf) {
        let cfg = DgpConfig::benchmark();
        let ds = misdid::bias_lab::simulate_panel(&cfg, n, seed).unwrap();
        let mut buf = Vec::new();
        ds.emit_csv(&mut buf).unwrap();
        let csv = self.path("panel.csv");
        std::fs::write(&csv, &buf).unwrap();
        let roles = self.write(
            "roles.toml",
            r#"outcome = "y"
time = "t"
id = "unit"
treatment = "d"
covariates = ["x1"]
instruments = ["z1"]
true_treatment = "dstar"
"#,
        );
        (csv, roles)
    }
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(&text).expect("report matches its schema")
}

#[test]
fn pop_fit_writes_a_valid_report() {
    let ws = Workspace::new();
    let (csv, roles) = ws.write_benchmark_panel(4000, 9001);
    let out = ws.path("pop.json");
    let output = run(&[
        "pop-fit",
        "--input",
        csv.to_str().unwrap(),
        "--roles",
        roles.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: PopFitReport = read_json(&out);
    assert!(report.converged);
    assert_eq!(report.schema_version, "1");
    assert_eq!(report.gamma.len(), 2);
    assert_eq!(report.alpha.len(), 2);
    // The generand has rho = -0.3; the fitted sign should match.
    assert!(report.rho < 0.0, "rho = {}", report.rho);
    assert!(report.wald_rho_zero.is_some());
    assert_eq!(report.provenance.seed, 3);
    assert_eq!(report.provenance.config_hash.len(), 64);
}

#[test]
fn malformed_csv_exits_2() {
    let ws = Workspace::new();
    let roles = ws.write(
        "roles.toml",
        r#"outcome = "y"
time = "t"
treatment = "d"
covariates = []
instruments = ["z1"]
"#,
    );
    let csv = ws.write("bad.csv", "y,t,d,z1\n1.0,0,oops,0.2\n");
    let out = ws.path("x.json");
    let output = run(&[
        "pop-fit",
        "--input",
        csv.to_str().unwrap(),
        "--roles",
        roles.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
    let msg = String::from_utf8_lossy(&output.stderr);
    assert!(msg.contains("row 0") && msg.contains("'d'"), "{msg}");
}

#[test]
fn missing_instruments_exit_3_citing_exclusion() {
    let ws = Workspace::new();
    let (csv, _) = ws.write_benchmark_panel(500, 9002);
    let roles = ws.write(
        "roles2.toml",
        r#"outcome = "y"
time = "t"
id = "unit"
treatment = "d"
covariates = ["x1"]
instruments = []
"#,
    );
    let out = ws.path("x.json");
    let output = run(&[
        "pop-fit",
        "--input",
        csv.to_str().unwrap(),
        "--roles",
        roles.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("exclusion restriction"),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn estimate_reports_naive_twostep_and_infeasible() {
    let ws = Workspace::new();
    let (csv, roles) = ws.write_benchmark_panel(50_000, 9003);
    let out = ws.path("est.json");
    let output = run(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--roles",
        roles.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--se",
        "none",
        "--seed",
        "1",
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: EstimateReport = read_json(&out);
    let methods: Vec<&str> = report.estimates.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, vec!["naive-FD", "twostep-FD", "infeasible-FD"]);
    // The two-step estimate should land nearer the generand than the naive one.
    let tau = |m: &str| report.estimates.iter().find(|r| r.method == m).unwrap().tau;
    assert!(
        (tau("twostep-FD") - 1.0).abs() < (tau("naive-FD") - 1.0).abs(),
        "naive {} twostep {}",
        tau("naive-FD"),
        tau("twostep-FD")
    );
    assert!(report.estimates[1].first_stage.is_some());
}

#[test]
fn estimate_dispatches_pols_for_cross_sections() {
    let ws = Workspace::new();
    let cfg = DgpConfig::benchmark();
    let ds = misdid::bias_lab::simulate_rcs(&cfg, 3000, 9004).unwrap();
    let mut buf = Vec::new();
    ds.emit_csv(&mut buf).unwrap();
    let csv = ws.path("rcs.csv");
    std::fs::write(&csv, &buf).unwrap();
    let roles = ws.write(
        "roles.toml",
        r#"outcome = "y"
time = "t"
treatment = "d"
covariates = ["x1"]
instruments = ["z1"]
true_treatment = "dstar"
"#,
    );
    let out = ws.path("est.json");
    let output = run(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--roles",
        roles.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--se",
        "none",
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: EstimateReport = read_json(&out);
    let methods: Vec<&str> = report.estimates.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, vec!["naive-POLS", "twostep-POLS", "infeasible-POLS"]);
}

#[test]
fn estimate_analytic_se_is_flagged() {
    let ws = Workspace::new();
    let (csv, roles) = ws.write_benchmark_panel(3000, 9005);
    let out = ws.path("est.json");
    let output = run(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--roles",
        roles.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--se",
        "analytic",
        "--estimators",
        "twostep-fd",
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: EstimateReport = read_json(&out);
    assert_eq!(report.estimates[0].se_source.as_deref(), Some("analytic"));
    assert!(report.estimates[0].se.unwrap() > 0.0);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let ws = Workspace::new();
    let (csv, roles) = ws.write_benchmark_panel(1000, 9006);
    let out_file = ws.path("from_file.json");
    let out_flag = ws.path("from_flag.json");
    let config = ws.write(
        "run.toml",
        &format!(
            "input = {:?}\nroles = {:?}\nout = {:?}\nse = \"none\"\nestimators = [\"naive-fd\"]\n",
            csv.to_str().unwrap(),
            roles.to_str().unwrap(),
            out_file.to_str().unwrap()
        ),
    );
    // Flag overrides the output path; everything else comes from the file.
    let output = run(&[
        "estimate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_flag.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out_flag.exists());
    assert!(!out_file.exists());
}

#[test]
fn simulate_writes_report_files_and_dump() {
    let ws = Workspace::new();
    let dgp = ws.write(
        "dgp.toml",
        r#"k = 1
delta = [0.5, 0.3]
theta = [1.0, 0.5]
eta1 = [1.0, 0.5]
eta2 = [0.5, 0.2]
gamma = [0.2, 0.8]
alpha = [0.3, 0.9]
sigma = 1.0
psi_v = 0.4
rho = -0.3
"#,
    );
    let out = ws.path("mc");
    let dump = ws.path("rep0.csv");
    let output = run(&[
        "simulate",
        "--dgp",
        dgp.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n",
        "300",
        "--reps",
        "4",
        "--seed",
        "2",
        "--estimators",
        "naive-fd,infeasible-fd",
        "--se",
        "none",
        "--dump-replicate",
        dump.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let json: misdid::cli::SimulateReport = read_json(&ws.path("mc.json"));
    assert_eq!(json.report.entries.len(), 2);
    assert_eq!(json.report.reps, 4);
    let csv_text = std::fs::read_to_string(ws.path("mc.csv")).unwrap();
    assert!(csv_text.starts_with("estimator,mean_tau,bias,sd,mcse,rmse,coverage,mean_se,reps_used"));
    assert_eq!(csv_text.lines().count(), 3);
    // The dumped replicate re-ingests as a valid dataset.
    let roles = misdid::data::Roles::from_path(&ws.path("rep0.roles.toml")).unwrap();
    let ds = misdid::data::Dataset::ingest_csv(&dump, roles).unwrap();
    assert_eq!(ds.n_units(), 300);
}

#[test]
fn decompose_joint_table_round_trips() {
    let ws = Workspace::new();
    let joint = ws.write(
        "joint.toml",
        r#"[prob]
d0 = [0.54, 0.06]
d1 = [0.12, 0.28]

[effect_mean]
d0 = [0.5, 2.0]
d1 = [0.5, 2.0]

[trend_mean]
d0 = [0.3, 0.3]
d1 = [0.3, 0.3]
"#,
    );
    let out = ws.path("dec.json");
    let output = run(&[
        "decompose",
        "--joint",
        joint.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: DecomposeReport = read_json(&out);
    assert!((report.decomposition.effect_recorded_treated - 1.55).abs() < 1e-12);
    assert!(report.prop1.effect_agrees && report.prop1.trend_agrees);
    assert!(report.theorem1.is_none());
}

#[test]
fn decompose_dgp_reports_trend_gap_and_plugins() {
    let ws = Workspace::new();
    let dgp = ws.write(
        "dgp.toml",
        r#"k = 1
delta = [0.5, 0.3]
theta = [1.0, 0.5]
eta1 = [1.0, 0.5]
eta2 = [0.5, 0.2]
gamma = [0.2, 0.8]
alpha = [0.3, 0.9]
sigma = 1.0
psi_v = 0.4
rho = -0.3
"#,
    );
    let out = ws.path("dec.json");
    let output = run(&[
        "decompose",
        "--dgp",
        dgp.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--moment-sample",
        "200000",
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: DecomposeReport = read_json(&out);
    // Correlated recording errors break parallel trends in the recorded
    // groups: the recorded trend gap is visibly nonzero.
    assert!(
        report.decomposition.trend_gap_recorded.abs() > 0.05,
        "trend gap {}",
        report.decomposition.trend_gap_recorded
    );
    let t1 = report.theorem1.unwrap();
    assert!(t1.fd_bias < -0.1, "fd bias {}", t1.fd_bias);
    assert!(t1.simple_bias.is_none());
}

#[test]
fn invalid_joint_probabilities_fail() {
    let ws = Workspace::new();
    let joint = ws.write(
        "joint.toml",
        r#"[prob]
d0 = [0.5, 0.2]
d1 = [0.2, 0.2]

[effect_mean]
d0 = [0.0, 1.0]
d1 = [0.0, 1.0]

[trend_mean]
d0 = [0.0, 0.0]
d1 = [0.0, 0.0]
"#,
    );
    let out = ws.path("dec.json");
    let output = run(&[
        "decompose",
        "--joint",
        joint.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&output.stderr).contains("sum"),);
}
