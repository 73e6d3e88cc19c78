//! Similarity-ordering probe: FT vs gated vs penalized fine-tuning.

use stochca_core::analysis::cosine_similarity_report;
use stochca_core::baselines::BaselineKind;
use stochca_core::datagen::Split;
use stochca_core::harness::{default_run_config, prepare_env, run_transfer_full};
use stochca_core::tensor::Tensor;

fn main() {
    let mut cfg = default_run_config();
    cfg.seeds = vec![0, 1, 2];
    cfg.sampling_rate = 0.15;
    for steps in [600usize, 900] {
    cfg.optimizer.total_steps = steps;
    cfg.optimizer.warmup_steps = steps / 10;
    println!("=== steps {steps}");

    let env = prepare_env(&cfg, None).expect("env");
    let eval_images: Vec<&Tensor> = env
        .target
        .split_indices(Split::Test)
        .into_iter()
        .take(32)
        .map(|i| &env.target.images[i])
        .collect();

    for (label, method, p, lambda) in [
        ("FT", BaselineKind::Ft, None, None),
        ("StochCA p=0.1", BaselineKind::Stochca, Some(0.1), None),
        ("StochCA p=0.3", BaselineKind::Stochca, Some(0.3), None),
        ("L2-Reg l=1.0", BaselineKind::L2Reg, None, Some(1.0)),
    ] {
        let mut m_cfg = cfg.clone();
        m_cfg.method = method;
        m_cfg.p = p;
        m_cfg.lambda = lambda;
        let (report, models) = run_transfer_full(&m_cfg, &env).unwrap();
        let mut q_avg = Vec::new();
        let mut k_avg = Vec::new();
        let mut v_avg = Vec::new();
        for model in &models {
            let sim = cosine_similarity_report(model, &env.frozen, &eval_images).unwrap();
            q_avg.push(sim.avg.q);
            k_avg.push(sim.avg.k);
            v_avg.push(sim.avg.v);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{label:<14} acc {:.3}  Q {:.4}  K {:.4}  V {:.4}",
            report.mean_accuracy,
            mean(&q_avg),
            mean(&k_avg),
            mean(&v_avg)
        );
    }
    }
}
