//! Optimization-recipe probes on the real source task.

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

    // One-batch overfit: can the model memorize 16 real images?
    {
        let mut init_rng = stream(0, "overfit/init");
        let mut model = ViTModel::init(cfg.model.clone(), &mut init_rng).unwrap();
        let optim = OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 10,
            total_steps: 300,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        };
        let mut opt = AdamW::new(&model, optim).unwrap();
        let idx: Vec<usize> = source.split_indices(Split::Train)[..16].to_vec();
        let batch = source.batch(&idx);
        let mut counts = OpCounts::default();
        let mut losses = Vec::new();
        for step in 0..300 {
            let loss = ft_train_step(&mut model, &batch, &mut opt, &mut counts).unwrap();
            if step % 50 == 0 || step == 299 {
                losses.push(format!("{step}:{loss:.3}"));
            }
        }
        println!("one-batch overfit: {}", losses.join(" "));
    }

    // Recipe sweep on the full task.
    for (lr, wd, steps, warmup, batch) in [
        (1e-3, 0.0, 600, 30, 16),
        (3e-4, 0.0, 600, 30, 16),
        (1e-3, 0.01, 1000, 50, 16),
        (3e-3, 0.0, 600, 30, 32),
    ] {
        let optim = OptimConfig {
            learning_rate: lr,
            weight_decay: wd,
            warmup_steps: warmup,
            total_steps: steps,
            batch_size: batch,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        };
        let mut init_rng = stream(0, "recipe/init");
        let mut model = ViTModel::init(cfg.model.clone(), &mut init_rng).unwrap();
        let mut opt = AdamW::new(&model, optim.clone()).unwrap();
        let mut order = BatchOrder::new(
            source.split_indices(Split::Train),
            batch,
            stream(0, "recipe/order"),
        )
        .unwrap();
        let mut counts = OpCounts::default();
        let mut final_loss = 0.0;
        for _ in 0..steps {
            let idx = order.next_batch();
            let b = source.batch(&idx);
            final_loss = ft_train_step(&mut model, &b, &mut opt, &mut counts).unwrap();
        }
        let acc = accuracy(&model, &source, Split::Train).unwrap();
        println!(
            "lr {lr:.0e} wd {wd} steps {steps} batch {batch}: final loss {final_loss:.3}, train acc {acc:.3}"
        );
    }
}
