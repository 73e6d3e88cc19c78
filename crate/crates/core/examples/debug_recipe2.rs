//! Pretraining stability probe across learning rates, batches, seeds.

use stochca_core::analysis::OpCounts;
use stochca_core::baselines::ft_train_step;
use stochca_core::datagen::{accuracy, generate_domain, BatchOrder, Split};
use stochca_core::harness::default_run_config;
use stochca_core::optim::{AdamW, OptimConfig};
use stochca_core::rng::stream;
use stochca_core::vit::ViTModel;

fn main() {
    let cfg = default_run_config();
    let source = generate_domain(
        &cfg.data.source,
        cfg.model.image_size,
        cfg.data.source_per_class,
        cfg.data.dataset_seed,
    )
    .unwrap();

    for lr in [1e-3, 1.5e-3, 2e-3, 3e-3] {
        for batch in [32usize, 48] {
            let mut accs = Vec::new();
            for seed in [2024u64, 0, 7] {
                let optim = OptimConfig {
                    learning_rate: lr,
                    weight_decay: 0.01,
                    warmup_steps: 50,
                    total_steps: 700,
                    batch_size: batch,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    max_grad_norm: Some(1.0),
                };
                let mut init_rng = stream(seed, "pretrain/init");
                let mut model = ViTModel::init(cfg.model.clone(), &mut init_rng).unwrap();
                let mut opt = AdamW::new(&model, optim).unwrap();
                let mut order = BatchOrder::new(
                    source.split_indices(Split::Train),
                    batch,
                    stream(seed, "pretrain/order"),
                )
                .unwrap();
                let mut counts = OpCounts::default();
                for _ in 0..700 {
                    let idx = order.next_batch();
                    let b = source.batch(&idx);
                    ft_train_step(&mut model, &b, &mut opt, &mut counts).unwrap();
                }
                accs.push(accuracy(&model, &source, Split::Train).unwrap());
            }
            println!(
                "lr {lr:.1e} batch {batch}: accs {:?}",
                accs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()
            );
        }
    }
}
