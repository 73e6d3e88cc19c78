//! End-to-end gradient check probe.

use stochca_core::analysis::{grad_check, grad_check_gated, GradCheckConfig};
use stochca_core::rng::stream;
use stochca_core::tensor::Tensor;
use stochca_core::vit::{InitScheme, ViTConfig, ViTModel};
use rand::Rng;

fn main() {
    let config = ViTConfig {
        image_size: 6,
        patch_size: 3,
        channels: 1,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        layer_norm_eps: 1e-6,
        init: InitScheme::default(),
    };
    let mut rng = stream(0, "grad-debug");
    let model = ViTModel::init(config.clone(), &mut rng).unwrap();
    let values: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let image = Tensor::new(vec![1, 6, 6], values).unwrap();

    let cfg = GradCheckConfig { step: 1e-6, min_samples: 400, seed: 7 };
    let report = grad_check(&model, &image, 1, &cfg).unwrap();
    println!(
        "pure SA: max rel err {:.3e} at {} ({} coords)",
        report.max_rel_error, report.worst_param, report.coords_checked
    );

    let frozen = ViTModel::init(config, &mut rng).unwrap();
    let gated = grad_check_gated(&model, &frozen, &[true, false], &image, 1, &cfg).unwrap();
    println!(
        "gated:   max rel err {:.3e} at {} ({} coords)",
        gated.max_rel_error, gated.worst_param, gated.coords_checked
    );
}
