//! Loss-trajectory probe for the pretraining loop.

use stochca_core::analysis::OpCounts;
use stochca_core::baselines::ft_train_step;
use stochca_core::datagen::{accuracy, generate_domain, BatchOrder, Split};
use stochca_core::harness::default_run_config;
use stochca_core::optim::AdamW;
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
    println!("source: {} images, {} classes", source.len(), source.num_classes());

    let mut init_rng = stream(cfg.data.dataset_seed, "pretrain/init");
    let mut model = ViTModel::init(cfg.model.clone(), &mut init_rng).unwrap();
    let mut opt = AdamW::new(&model, cfg.data.pretrain.clone()).unwrap();
    let mut order = BatchOrder::new(
        source.split_indices(Split::Train),
        cfg.data.pretrain.batch_size,
        stream(cfg.data.dataset_seed, "pretrain/order"),
    )
    .unwrap();
    let mut counts = OpCounts::default();

    for step in 0..cfg.data.pretrain.total_steps {
        let idx = order.next_batch();
        let batch = source.batch(&idx);
        let loss = ft_train_step(&mut model, &batch, &mut opt, &mut counts).unwrap();
        if step % 25 == 0 || step + 1 == cfg.data.pretrain.total_steps {
            let lr = cfg.data.pretrain.lr_at(step);
            println!("step {step:4}  loss {loss:.4}  lr {lr:.5}");
        }
    }
    let train_acc = accuracy(&model, &source, Split::Train).unwrap();
    println!("train acc {train_acc:.3}");
}
