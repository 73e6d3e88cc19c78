//! One-rate grid across all methods, timed.

use stochca_core::baselines::BaselineKind;
use stochca_core::harness::{default_run_config, prepare_env, run_tl_grid};
use std::time::Instant;

fn main() {
    let mut cfg = default_run_config();
    cfg.seeds = vec![0, 1, 2, 3, 4];
    cfg.data.target_per_class = stochca_core::datagen::SplitSizes { train: 60, val: 0, test: 40 };

    let env = prepare_env(&cfg, None).expect("env");
    let t0 = Instant::now();
    let grid = run_tl_grid(&cfg, &env, &BaselineKind::all(), &[0.15]).unwrap();
    println!("one-rate grid in {:.0}s", t0.elapsed().as_secs_f64());
    for (method, cells) in &grid.rows {
        println!(
            "{method:<16} {}",
            cells
                .iter()
                .map(|c| format!("{:.3}+-{:.3}", c.mean, c.std))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
}
