//! Fixed-p diagnostic: gated training vs plain fine-tuning per p value,
//! no selection noise.

use stochca_core::baselines::BaselineKind;
use stochca_core::harness::{default_run_config, prepare_env, run_transfer};
use std::time::Instant;

fn main() {
    let mut cfg = default_run_config();
    cfg.seeds = vec![0, 1, 2, 3, 4];
    cfg.data.target_per_class = stochca_core::datagen::SplitSizes { train: 60, val: 0, test: 40 };
    cfg.optimizer.total_steps = 300;
    cfg.optimizer.warmup_steps = 30;

    let t0 = Instant::now();
    let env = prepare_env(&cfg, None).expect("env");
    println!("env in {:.0}s", t0.elapsed().as_secs_f64());

    for rate in [0.15] {
        let mut ft_cfg = cfg.clone();
        ft_cfg.method = BaselineKind::Ft;
        ft_cfg.sampling_rate = rate;
        let t = Instant::now();
        let ft = run_transfer(&ft_cfg, &env).unwrap();
        println!(
            "rate {rate}: FT    mean {:.3} +- {:.3} ({:.0}s)",
            ft.mean_accuracy,
            ft.std_accuracy,
            t.elapsed().as_secs_f64()
        );
        for p in [-1.0, 0.1, 0.3, 0.5, 0.7] {
            let mut p_cfg = cfg.clone();
            p_cfg.method = BaselineKind::Stochca;
            p_cfg.sampling_rate = rate;
            p_cfg.p = if p < 0.0 { None } else { Some(p) };
            let t = Instant::now();
            let r = run_transfer(&p_cfg, &env).unwrap();
            println!(
                "rate {rate}: p={p} mean {:.3} +- {:.3} sel {:?} ({:.0}s)",
                r.mean_accuracy,
                r.std_accuracy,
                r.per_seed.iter().map(|s| s.selected.clone()).collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
    }
}
