//! Diagnostic instruments: per-layer Q/K/V cosine similarity between a
//! fine-tuned model and its frozen reference, end-to-end gradient
//! checking, and operation-count accounting.

use crate::error::{Error, Result};
use crate::stochca::{extract_kv, stochca_forward, KVCache};
use crate::tensor::{cross_entropy_loss, Tape, Tensor};
use crate::vit::{collect_qkv, forward, forward_image, AttnSource, ViTModel};
use serde::{Deserialize, Serialize};

/// Attention-sublayer and forward-pass counters, accumulated per run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Attention sublayers evaluated inside the target model.
    pub target_attn_evals: u64,
    /// Attention sublayers evaluated inside the frozen model.
    pub frozen_attn_evals: u64,
    /// Full target forwards (one per image per path).
    pub target_forwards: u64,
    /// Full frozen forwards (key/value extraction or ensemble paths).
    pub frozen_forwards: u64,
}

impl OpCounts {
    pub fn merge(&mut self, other: &OpCounts) {
        self.target_attn_evals += other.target_attn_evals;
        self.frozen_attn_evals += other.frozen_attn_evals;
        self.target_forwards += other.target_forwards;
        self.frozen_forwards += other.frozen_forwards;
    }
}

/// Mean cosine similarity of one layer's queries, keys, and values.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

/// Per-layer Q/K/V cosine similarity between two models, averaged over
/// tokens and then over evaluation images. Aggregation: per-token cosine
/// on concatenated (not per-head) vectors, averaged per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub layers: Vec<LayerSimilarity>,
    /// Arithmetic mean of each column.
    pub avg: LayerSimilarity,
    /// Zero-norm rows encountered (their contribution is 0).
    pub zero_norm_rows: u64,
    pub images: usize,
}

fn cosine(a: &[f64], b: &[f64], zero_norm: &mut u64) -> f64 {
    // Identical vectors have similarity 1 by definition; taking the
    // shortcut keeps self-similarity exact instead of within an ulp.
    if a == b {
        if a.iter().all(|&x| x == 0.0) {
            *zero_norm += 1;
            return 0.0;
        }
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        *zero_norm += 1;
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Compare pure self-attention activations of `target` and `frozen` on
/// an evaluation set.
pub fn cosine_similarity_report(
    target: &ViTModel,
    frozen: &ViTModel,
    eval_images: &[&Tensor],
) -> Result<SimilarityReport> {
    if !target.config.same_backbone(&frozen.config) {
        return Err(Error::config(
            "similarity report requires models with a shared architecture",
        ));
    }
    if eval_images.is_empty() {
        return Err(Error::contract("similarity report needs at least one image"));
    }
    let depth = target.config.depth;
    let mut sums = vec![LayerSimilarity::default(); depth];
    let mut zero_norm_rows = 0u64;

    for image in eval_images {
        let t_acts = collect_qkv(target, image)?;
        let f_acts = collect_qkv(frozen, image)?;
        for l in 0..depth {
            let (tq, tk, tv) = &t_acts[l];
            let (fq, fk, fv) = &f_acts[l];
            let tokens = tq.shape()[0];
            let dim = tq.shape()[1];
            let mut acc = LayerSimilarity::default();
            for row in 0..tokens {
                let range = row * dim..(row + 1) * dim;
                acc.q += cosine(&tq.values()[range.clone()], &fq.values()[range.clone()], &mut zero_norm_rows);
                acc.k += cosine(&tk.values()[range.clone()], &fk.values()[range.clone()], &mut zero_norm_rows);
                acc.v += cosine(&tv.values()[range.clone()], &fv.values()[range], &mut zero_norm_rows);
            }
            sums[l].q += acc.q / tokens as f64;
            sums[l].k += acc.k / tokens as f64;
            sums[l].v += acc.v / tokens as f64;
        }
    }

    let n = eval_images.len() as f64;
    let layers: Vec<LayerSimilarity> = sums
        .iter()
        .map(|s| LayerSimilarity { q: s.q / n, k: s.k / n, v: s.v / n })
        .collect();
    let mut avg = LayerSimilarity::default();
    for l in &layers {
        avg.q += l.q;
        avg.k += l.k;
        avg.v += l.v;
    }
    avg.q /= depth as f64;
    avg.k /= depth as f64;
    avg.v /= depth as f64;
    Ok(SimilarityReport {
        layers,
        avg,
        zero_norm_rows,
        images: eval_images.len(),
    })
}

/// CSV with rows = layers + `Avg.` and column groups Q/K/V per labeled
/// report.
pub fn similarity_csv(reports: &[(String, &SimilarityReport)]) -> String {
    let mut out = String::from("layer");
    for quantity in ["Q", "K", "V"] {
        for (label, _) in reports {
            out.push_str(&format!(",{quantity}:{label}"));
        }
    }
    out.push('\n');
    let depth = reports.first().map(|(_, r)| r.layers.len()).unwrap_or(0);
    for l in 0..depth {
        out.push_str(&format!("{}", l + 1));
        for pick in [0, 1, 2] {
            for (_, r) in reports {
                let s = r.layers[l];
                let v = [s.q, s.k, s.v][pick];
                out.push_str(&format!(",{v:.6}"));
            }
        }
        out.push('\n');
    }
    out.push_str("Avg.");
    for pick in [0, 1, 2] {
        for (_, r) in reports {
            let v = [r.avg.q, r.avg.k, r.avg.v][pick];
            out.push_str(&format!(",{v:.6}"));
        }
    }
    out.push('\n');
    out
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Minimum number of coordinates to sample, spread over every
    /// parameter family.
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-6, min_samples: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Finite-difference check of the cross-entropy gradient for a pure
/// self-attention forward.
pub fn grad_check(
    model: &ViTModel,
    image: &Tensor,
    label: usize,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_impl(model, None, image, label, cfg)
}

/// Finite-difference check with a fixed SA/CA gate pattern. The frozen
/// model supplies the key/value cache and its parameters are never
/// perturbed.
pub fn grad_check_gated(
    target: &ViTModel,
    frozen: &ViTModel,
    gates: &[bool],
    image: &Tensor,
    label: usize,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if gates.len() != target.config.depth {
        return Err(Error::Contract(format!(
            "{} gates for depth {}",
            gates.len(),
            target.config.depth
        )));
    }
    let cache = extract_kv(frozen, image)?;
    grad_check_impl(target, Some((cache, gates.to_vec())), image, label, cfg)
}

fn grad_check_impl(
    model: &ViTModel,
    gating: Option<(KVCache, Vec<bool>)>,
    image: &Tensor,
    label: usize,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    use rand::Rng;

    let eval_loss = |m: &ViTModel| -> Result<f64> {
        let logits = match &gating {
            None => forward(image, m)?,
            Some((cache, gates)) => stochca_forward(m, cache, gates, image)?,
        };
        Ok(cross_entropy_loss(&logits, &[label])?.values()[0])
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::train();
    let (bound, hw, hb) = model.bind_with_head(&mut tape)?;
    let modes: Vec<AttnSource<'_>> = match &gating {
        None => vec![AttnSource::SelfAttn; model.config.depth],
        Some((cache, gates)) => crate::stochca::gate_modes(gates, cache),
    };
    let pass = forward_image(&mut tape, &bound, (hw, hb), &model.config, image, &modes, false)?;
    let loss = tape.cross_entropy(pass.logits, &[label])?;
    tape.backward(loss)?;
    let ids = bound.param_ids(hw, hb);

    let params = model.params();
    let per_param = cfg.min_samples.div_ceil(params.len()).max(1);
    let mut rng = crate::rng::stream(cfg.seed, "grad-check");

    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    for (idx, (name, tensor)) in params.iter().enumerate() {
        let analytic = tape.grad(ids[idx]);
        for _ in 0..per_param.min(tensor.numel()) {
            let coord = rng.gen_range(0..tensor.numel());
            let a = analytic.map_or(0.0, |g| g[coord]);

            let mut plus = model.clone();
            plus.params_mut()[idx].1.values_mut()[coord] += cfg.step;
            let mut minus = model.clone();
            minus.params_mut()[idx].1.values_mut()[coord] -= cfg.step;
            let fd = (eval_loss(&plus)? - eval_loss(&minus)?) / (2.0 * cfg.step);

            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            checked += 1;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{coord}]"));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        coords_checked: checked,
    })
}
