//! Simulate a two-period panel with one-sidedly misrecorded treatment and
//! write it out as CSV plus a roles file, ready for the `misdid` CLI.
//!
//! ```text
//! cargo run --example simulate_data -- [out_dir]
//! ```

use misdid::bias_lab::DgpConfig;

fn main() {
    let out_dir = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    std::fs::create_dir_all(&out_dir).expect("create output directory");

    let cfg = DgpConfig::benchmark();
    let n = 4000;
    let ds = misdid::bias_lab::simulate_panel(&cfg, n, 42).expect("simulate");

    let csv_path = format!("{out_dir}/panel.csv");
    let mut buf = Vec::new();
    ds.emit_csv(&mut buf).expect("emit");
    std::fs::write(&csv_path, &buf).expect("write csv");

    let roles_path = format!("{out_dir}/roles.toml");
    std::fs::write(&roles_path, toml::to_string(&ds.roles).unwrap()).expect("write roles");

    let d: f64 = ds.column("d").unwrap().iter().sum::<f64>() / ds.n_rows() as f64;
    let dstar: f64 = ds.column("dstar").unwrap().iter().sum::<f64>() / ds.n_rows() as f64;
    println!("wrote {csv_path} ({n} units, two rows each) and {roles_path}");
    println!("true treatment share  {dstar:.3}");
    println!("recorded share        {d:.3}");
    println!("exclusion error rate  {:.3} of the truly treated", 1.0 - d / dstar);
    println!();
    println!("next: misdid estimate --input {csv_path} --roles {roles_path} --out report.json");
}
