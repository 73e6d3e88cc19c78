//! Longer-schedule and wider-model stability probes.

use stochca_core::analysis::OpCounts;
use stochca_core::baselines::ft_train_step;
use stochca_core::datagen::{accuracy, generate_domain, BatchOrder, Split};
use stochca_core::harness::default_run_config;
use stochca_core::optim::{AdamW, OptimConfig};
use stochca_core::rng::stream;
use stochca_core::vit::{ViTConfig, ViTModel};
use std::time::Instant;

fn probe(label: &str, model_cfg: &ViTConfig, optim: &OptimConfig) {
    let cfg = default_run_config();
    let source = generate_domain(
        &cfg.data.source,
        model_cfg.image_size,
        cfg.data.source_per_class,
        cfg.data.dataset_seed,
    )
    .unwrap();
    let t0 = Instant::now();
    let mut accs = Vec::new();
    for seed in [2024u64, 0, 7] {
        let mut init_rng = stream(seed, "pretrain/init");
        let mut model = ViTModel::init(model_cfg.clone(), &mut init_rng).unwrap();
        let mut opt = AdamW::new(&model, optim.clone()).unwrap();
        let mut order = BatchOrder::new(
            source.split_indices(Split::Train),
            optim.batch_size,
            stream(seed, "pretrain/order"),
        )
        .unwrap();
        let mut counts = OpCounts::default();
        for _ in 0..optim.total_steps {
            let idx = order.next_batch();
            let b = source.batch(&idx);
            ft_train_step(&mut model, &b, &mut opt, &mut counts).unwrap();
        }
        accs.push(accuracy(&model, &source, Split::Train).unwrap());
    }
    println!(
        "{label}: accs {:?} ({:.0}s)",
        accs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let base = default_run_config();
    let d16 = base.model.clone();
    let d24 = ViTConfig { dim: 24, ..d16.clone() };

    let mk = |lr: f64, warmup: usize, steps: usize, batch: usize| OptimConfig {
        learning_rate: lr,
        weight_decay: 0.01,
        warmup_steps: warmup,
        total_steps: steps,
        batch_size: batch,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        max_grad_norm: Some(1.0),
    };

    probe("d16 lr1e-3 w100 s1500 b32", &d16, &mk(1e-3, 100, 1500, 32));
    probe("d16 lr1.5e-3 w150 s1000 b32", &d16, &mk(1.5e-3, 150, 1000, 32));
    probe("d24 lr1e-3 w100 s800 b32", &d24, &mk(1e-3, 100, 800, 32));
    probe("d24 lr1.5e-3 w100 s800 b32", &d24, &mk(1.5e-3, 100, 800, 32));
}
