//! Estimate the ATT on one simulated panel three ways: the naive
//! first-difference regression on the recorded treatment, the two-step
//! correction, and the infeasible regression on the true treatment.
//! Bootstrap standard errors re-estimate both stages per replicate.

use misdid::bias_lab::DgpConfig;
use misdid::estimators::{
    did_fd_infeasible, did_fd_naive, did_fd_twostep, BootstrapPlan, EstimatorOptions, SeMode,
};

fn main() {
    let cfg = DgpConfig::benchmark();
    println!("generand ATT = {}", cfg.tau());
    let ds = misdid::bias_lab::simulate_panel(&cfg, 20_000, 11).expect("simulate");

    let opts = EstimatorOptions {
        se: SeMode::Bootstrap(BootstrapPlan { replications: 100, seed: 1, scheme: None }),
        ..Default::default()
    };
    let spec = cfg.pop_spec();

    let naive = did_fd_naive(&ds, &opts).expect("naive");
    let twostep = did_fd_twostep(&ds, &spec, &opts).expect("two-step");
    let infeasible = did_fd_infeasible(&ds, &opts).expect("infeasible");

    println!("{:>14} {:>10} {:>10}", "estimator", "tau_hat", "boot se");
    for est in [&naive, &twostep, &infeasible] {
        println!(
            "{:>14} {:>10.4} {:>10.4}",
            est.method.label(),
            est.tau_att,
            est.se_tau.unwrap()
        );
    }
    let fs = twostep.first_stage.as_ref().unwrap();
    println!(
        "\nfirst stage: gamma = ({:+.3}, {:+.3}), alpha = ({:+.3}, {:+.3}), rho = {:+.3}",
        fs.gamma[0], fs.gamma[1], fs.alpha[0], fs.alpha[1], fs.rho
    );
    println!(
        "the naive estimate is attenuated and trend-contaminated; the two-step\n\
         regression on predicted treatment probabilities recovers the ATT."
    );
}
