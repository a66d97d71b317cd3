use misdid::bias_lab::*;
use misdid::data::Layout;
use misdid::estimators::{BootstrapPlan, Method, SeMode};

fn main() {
    let cfg = DgpConfig::benchmark();
    let t = std::time::Instant::now();
    let mc = McConfig { layout: Layout::Panel, methods: vec![Method::TwostepFd], n: 4000, reps: 20, seed: 77, se: SeMode::Bootstrap(BootstrapPlan::default()) };
    let r = monte_carlo(&cfg, &mc).unwrap();
    let dt = t.elapsed();
    println!("20 reps took {dt:?} -> {:.2} s/rep -> 500 reps ~ {:.1} min; mean boot se {:.4}",
        dt.as_secs_f64() / 20.0, dt.as_secs_f64() / 20.0 * 500.0 / 60.0, r.entries[0].mean_se.unwrap());
}
