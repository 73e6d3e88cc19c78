//! Scratch harness for sizing the desk-scale defaults. Not part of the
//! test suite; run with `cargo run -p stochca-core --example tune`.

use stochca_core::baselines::BaselineKind;
use stochca_core::datagen::{accuracy, Split};
use stochca_core::harness::{default_run_config, prepare_env, run_transfer};
use std::time::Instant;

fn main() {
    let mut cfg = default_run_config();
    cfg.seeds = vec![0, 1, 2];

    let t0 = Instant::now();
    let env = prepare_env(&cfg, None).expect("env");
    println!("env prepared in {:.1}s", t0.elapsed().as_secs_f64());

    let train_acc = accuracy(&env.frozen, &env.source, Split::Train).unwrap();
    let test_acc = accuracy(&env.frozen, &env.source, Split::Test).unwrap();
    println!("frozen source train acc {train_acc:.3}, test acc {test_acc:.3}");

    for rate in [0.15, 1.0] {
        for method in [BaselineKind::Ft, BaselineKind::Stochca] {
            let mut m_cfg = cfg.clone();
            m_cfg.method = method;
            m_cfg.sampling_rate = rate;
            if method == BaselineKind::Stochca {
                m_cfg.p = None;
            }
            let t = Instant::now();
            let report = run_transfer(&m_cfg, &env).expect("run");
            println!(
                "rate {rate} {:<8} mean {:.3} +- {:.3} (selected: {:?}) in {:.1}s",
                report.method,
                report.mean_accuracy,
                report.std_accuracy,
                report
                    .per_seed
                    .iter()
                    .map(|s| s.selected.clone())
                    .collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
    }
}
