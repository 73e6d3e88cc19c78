//! Stochastic cross-attention training.
//!
//! Each training step draws one Bernoulli gate per layer. A gated layer
//! attends to keys/values extracted from the frozen reference model on
//! the current batch; an ungated layer runs ordinary self-attention.
//! Inference is always pure self-attention: the frozen model is never
//! part of the deployed computation.

use crate::analysis::OpCounts;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::{Tape, Tensor};
use crate::vit::{forward, forward_image, AttnSource, ViTModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Keys and values of one layer, pre-projected by the frozen model's own
/// `W_K`, `W_V` on its own hidden state. Shape `[tokens, dim]` each.
#[derive(Clone, Debug)]
pub struct LayerKV {
    pub k: Tensor,
    pub v: Tensor,
}

/// Per-layer keys/values extracted from the frozen model for one image.
/// Carries no gradient state; the frozen model is never updated.
#[derive(Clone, Debug)]
pub struct KVCache {
    pub layers: Vec<LayerKV>,
}

impl KVCache {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Check the cache fits a target model's architecture.
    pub fn validate_for(&self, target: &ViTModel) -> Result<()> {
        if self.layers.len() != target.config.depth {
            return Err(Error::Config(format!(
                "cache has {} layers, target has depth {}",
                self.layers.len(),
                target.config.depth
            )));
        }
        let expected = [target.config.tokens(), target.config.dim];
        for (l, kv) in self.layers.iter().enumerate() {
            if kv.k.shape() != expected || kv.v.shape() != expected {
                return Err(Error::Config(format!(
                    "cache layer {l} has shapes {:?}/{:?}, expected {expected:?}",
                    kv.k.shape(),
                    kv.v.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Whether gates are drawn once per batch or once per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    PerBatch,
    PerSample,
}

/// One independent Bernoulli(p) draw per layer.
pub fn draw_gates(p: f64, layers: usize, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::Contract(format!(
            "cross-attention probability {p} outside [0, 1]"
        )));
    }
    Ok((0..layers).map(|_| rng.gen::<f64>() < p).collect())
}

/// Reproducible per-step gate draws with their history.
#[derive(Debug)]
pub struct GateSchedule {
    pub p: f64,
    pub seed: u64,
    pub draws: Vec<Vec<bool>>,
    rng: ChaCha8Rng,
}

impl GateSchedule {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::Contract(format!(
                "cross-attention probability {p} outside [0, 1]"
            )));
        }
        Ok(GateSchedule {
            p,
            seed,
            draws: Vec::new(),
            rng: crate::rng::stream(seed, "gates"),
        })
    }

    /// Draw and record the next step's gates.
    pub fn next(&mut self, layers: usize) -> Result<Vec<bool>> {
        let gates = draw_gates(self.p, layers, &mut self.rng)?;
        self.draws.push(gates.clone());
        Ok(gates)
    }
}

/// Run the frozen model on one image with pure self-attention and record
/// each layer's pre-projected keys and values. No differentiation state
/// is built.
pub fn extract_kv(frozen: &ViTModel, image: &Tensor) -> Result<KVCache> {
    let mut tape = Tape::eval();
    let (bound, hw, hb) = frozen.bind_with_head(&mut tape)?;
    let modes = vec![AttnSource::SelfAttn; frozen.config.depth];
    let pass = forward_image(&mut tape, &bound, (hw, hb), &frozen.config, image, &modes, true)?;
    let layers = pass
        .traces
        .iter()
        .map(|t| LayerKV {
            k: tape.value(t.k).detached(),
            v: tape.value(t.v).detached(),
        })
        .collect();
    Ok(KVCache { layers })
}

/// Gated forward for one image: layer `l` cross-attends to the cache
/// when `gates[l]` is set, otherwise self-attends. Returns the
/// `[1, num_classes]` logits.
pub fn stochca_forward(
    target: &ViTModel,
    cache: &KVCache,
    gates: &[bool],
    image: &Tensor,
) -> Result<Tensor> {
    if gates.len() != target.config.depth {
        return Err(Error::Contract(format!(
            "{} gates for depth {}",
            gates.len(),
            target.config.depth
        )));
    }
    cache.validate_for(target)?;
    let mut tape = Tape::eval();
    let (bound, hw, hb) = target.bind_with_head(&mut tape)?;
    let modes = gate_modes(gates, cache);
    let pass = forward_image(&mut tape, &bound, (hw, hb), &target.config, image, &modes, false)?;
    Ok(tape.value(pass.logits).detached())
}

pub(crate) fn gate_modes<'a>(gates: &[bool], cache: &'a KVCache) -> Vec<AttnSource<'a>> {
    gates
        .iter()
        .zip(&cache.layers)
        .map(|(&g, kv)| {
            if g {
                AttnSource::Cross { k: &kv.k, v: &kv.v }
            } else {
                AttnSource::SelfAttn
            }
        })
        .collect()
}

/// A mini-batch of images with class labels.
pub struct Batch<'a> {
    pub images: Vec<&'a Tensor>,
    pub labels: Vec<usize>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One gated training step over a batch.
///
/// Gates are drawn once (shared across the batch) under
/// [`GateMode::PerBatch`], or per sample otherwise. Keys/values are
/// extracted from the frozen model for every image of the current batch,
/// the gated forward runs on a fresh tape, and only target parameters
/// are updated. Returns the batch loss.
pub fn train_step(
    target: &mut ViTModel,
    frozen: &ViTModel,
    batch: &Batch<'_>,
    p: f64,
    opt: &mut AdamW,
    gate_rng: &mut ChaCha8Rng,
    gate_mode: GateMode,
    counts: &mut OpCounts,
) -> Result<f64> {
    if !frozen.config.same_backbone(&target.config) {
        return Err(Error::config(
            "frozen and target models must share an architecture",
        ));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let depth = target.config.depth;
    let shared_gates = match gate_mode {
        GateMode::PerBatch => Some(draw_gates(p, depth, gate_rng)?),
        GateMode::PerSample => None,
    };

    let mut tape = Tape::train();
    let (bound, hw, hb) = target.bind_with_head(&mut tape)?;
    let mut logit_rows = Vec::with_capacity(batch.len());
    for image in &batch.images {
        let gates = match &shared_gates {
            Some(g) => g.clone(),
            None => draw_gates(p, depth, gate_rng)?,
        };
        let cache = extract_kv(frozen, image)?;
        counts.frozen_forwards += 1;
        counts.frozen_attn_evals += depth as u64;
        cache.validate_for(target)?;
        let modes = gate_modes(&gates, &cache);
        let before = tape.attn_evals;
        let pass = forward_image(&mut tape, &bound, (hw, hb), &target.config, image, &modes, false)?;
        counts.target_attn_evals += tape.attn_evals - before;
        counts.target_forwards += 1;
        logit_rows.push(pass.logits);
    }
    let logits = tape.concat_rows(&logit_rows)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let loss_value = tape.value(loss).values()[0];
    tape.backward(loss)?;

    let ids = bound.param_ids(hw, hb);
    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
    opt.apply(target, &grads)?;
    Ok(loss_value)
}

/// Deployed inference: pure self-attention, no cache, no frozen model.
pub fn infer(target: &ViTModel, image: &Tensor) -> Result<Tensor> {
    forward(image, target)
}

/// Inference with cost accounting.
pub fn infer_counted(target: &ViTModel, image: &Tensor, counts: &mut OpCounts) -> Result<Tensor> {
    let mut tape = Tape::eval();
    let (bound, hw, hb) = target.bind_with_head(&mut tape)?;
    let modes = vec![AttnSource::SelfAttn; target.config.depth];
    let pass = forward_image(&mut tape, &bound, (hw, hb), &target.config, image, &modes, false)?;
    counts.target_attn_evals += tape.attn_evals;
    counts.target_forwards += 1;
    Ok(tape.value(pass.logits).detached())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimConfig;
    use crate::rng::stream;
    use crate::vit::{InitScheme, ViTConfig};
    use rand::Rng;

    fn config() -> ViTConfig {
        ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            depth: 3,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            layer_norm_eps: 1e-6,
            init: InitScheme::default(),
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng) -> Tensor {
        let values: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![1, 4, 4], values).unwrap()
    }

    fn optim_config() -> OptimConfig {
        OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 2,
            total_steps: 100,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }

    #[test]
    fn gates_at_extremes() {
        let mut rng = stream(1, "gates");
        assert_eq!(draw_gates(0.0, 6, &mut rng).unwrap(), vec![false; 6]);
        assert_eq!(draw_gates(1.0, 6, &mut rng).unwrap(), vec![true; 6]);
        assert!(draw_gates(-0.1, 6, &mut rng).is_err());
        assert!(draw_gates(1.1, 6, &mut rng).is_err());
    }

    #[test]
    fn gate_frequency_concentrates() {
        // 10_000 layer draws at p = 0.1: the empirical rate sits inside
        // the 3-sigma binomial band [0.09, 0.11].
        let mut schedule = GateSchedule::new(0.1, 42).unwrap();
        let mut on = 0u32;
        for _ in 0..1000 {
            on += schedule.next(10).unwrap().iter().filter(|&&g| g).count() as u32;
        }
        let rate = on as f64 / 10_000.0;
        assert!((0.09..=0.11).contains(&rate), "rate {rate}");
        assert_eq!(schedule.draws.len(), 1000);
    }

    #[test]
    fn gate_schedule_reproducible_from_seed() {
        let mut a = GateSchedule::new(0.3, 7).unwrap();
        let mut b = GateSchedule::new(0.3, 7).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next(4).unwrap(), b.next(4).unwrap());
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = stream(2, "extract");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let image = rand_image(&mut rng);
        let c1 = extract_kv(&frozen, &image).unwrap();
        let c2 = extract_kv(&frozen, &image).unwrap();
        assert_eq!(c1.depth(), 3);
        for (a, b) in c1.layers.iter().zip(&c2.layers) {
            assert_eq!(a.k.le_bytes(), b.k.le_bytes());
            assert_eq!(a.v.le_bytes(), b.v.le_bytes());
        }
        // Extracted tensors carry no differentiation state.
        assert!(c1.layers[0].k.grad().is_none());
        assert!(c1.layers[0].k.node().is_none());
    }

    #[test]
    fn extraction_matches_manual_replay() {
        // Replay the frozen forward layer by layer with the public
        // plain-tensor ops and compare the layer-l keys.
        let mut rng = stream(3, "replay");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();

        let mut h = crate::vit::patch_embed(&image, &frozen).unwrap();
        for (l, block) in frozen.blocks.iter().enumerate() {
            let normed =
                crate::tensor::layer_norm(&h, &block.norm1_gain, &block.norm1_bias, 1e-6).unwrap();
            let k = crate::tensor::matmul(&normed, &block.attn.w_k).unwrap();
            assert!(cache.layers[l].k.max_abs_diff(&k) <= 1e-12, "layer {l}");

            // Advance h with a full block forward.
            let attn = crate::attention::multi_head_attention(&normed, &block.attn, None).unwrap();
            let mut u = h.clone();
            for (a, b) in u.values_mut().iter_mut().zip(attn.values()) {
                *a += b;
            }
            let normed2 =
                crate::tensor::layer_norm(&u, &block.norm2_gain, &block.norm2_bias, 1e-6).unwrap();
            let m = crate::tensor::matmul(&normed2, &block.mlp_w1).unwrap();
            let mut act = m.clone();
            let hidden = block.mlp_b1.numel();
            for i in 0..u.shape()[0] {
                for j in 0..hidden {
                    let x = m.at2(i, j) + block.mlp_b1.values()[j];
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    act.values_mut()[i * hidden + j] =
                        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
                }
            }
            let m2 = crate::tensor::matmul(&act, &block.mlp_w2).unwrap();
            for i in 0..u.shape()[0] {
                for j in 0..8 {
                    u.values_mut()[i * 8 + j] += m2.at2(i, j) + block.mlp_b2.values()[j];
                }
            }
            h = u;
        }
    }

    #[test]
    fn all_false_gates_match_plain_forward_bitwise() {
        let mut rng = stream(4, "p0");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let mut target_rng = stream(5, "p0-target");
        let target = ViTModel::init(config(), &mut target_rng).unwrap();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();
        let gated = stochca_forward(&target, &cache, &[false; 3], &image).unwrap();
        let plain = forward(&image, &target).unwrap();
        assert_eq!(gated.le_bytes(), plain.le_bytes());
    }

    #[test]
    fn all_true_gates_at_initialization_match_pure_sa_bitwise() {
        // Target initialized from frozen: cross-attention to the frozen
        // cache coincides with self-attention exactly.
        let mut rng = stream(6, "init-id");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let target = frozen.clone();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();
        let all_ca = stochca_forward(&target, &cache, &[true; 3], &image).unwrap();
        let all_sa = forward(&image, &target).unwrap();
        assert_eq!(all_ca.le_bytes(), all_sa.le_bytes());

        // Any mixed pattern coincides as well.
        let mixed = stochca_forward(&target, &cache, &[true, false, true], &image).unwrap();
        assert_eq!(mixed.le_bytes(), all_sa.le_bytes());
    }

    #[test]
    fn single_gate_matches_hand_spliced_computation() {
        let mut rng = stream(7, "splice");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let mut t_rng = stream(8, "splice-target");
        let target = ViTModel::init(config(), &mut t_rng).unwrap();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();
        let gates = [true, false, false];
        let gated = stochca_forward(&target, &cache, &gates, &image).unwrap();

        // Hand-splice: block 0 cross-attends to the frozen cache, blocks
        // 1..L self-attend, then final norm and head.
        let mut h = crate::vit::patch_embed(&image, &target).unwrap();
        for (l, block) in target.blocks.iter().enumerate() {
            let normed =
                crate::tensor::layer_norm(&h, &block.norm1_gain, &block.norm1_bias, 1e-6).unwrap();
            let kv = if gates[l] {
                Some((&cache.layers[l].k, &cache.layers[l].v))
            } else {
                None
            };
            let attn = crate::attention::multi_head_attention(&normed, &block.attn, kv).unwrap();
            let mut u = h.clone();
            for (a, b) in u.values_mut().iter_mut().zip(attn.values()) {
                *a += b;
            }
            let normed2 =
                crate::tensor::layer_norm(&u, &block.norm2_gain, &block.norm2_bias, 1e-6).unwrap();
            let m = crate::tensor::matmul(&normed2, &block.mlp_w1).unwrap();
            let hidden = block.mlp_b1.numel();
            let mut act = m.clone();
            for i in 0..u.shape()[0] {
                for j in 0..hidden {
                    let x = m.at2(i, j) + block.mlp_b1.values()[j];
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    act.values_mut()[i * hidden + j] =
                        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
                }
            }
            let m2 = crate::tensor::matmul(&act, &block.mlp_w2).unwrap();
            for i in 0..u.shape()[0] {
                for j in 0..8 {
                    u.values_mut()[i * 8 + j] += m2.at2(i, j) + block.mlp_b2.values()[j];
                }
            }
            h = u;
        }
        let final_normed =
            crate::tensor::layer_norm(&h, &target.final_gain, &target.final_bias, 1e-6).unwrap();
        let cls = final_normed.row(0).unwrap();
        let logits = crate::tensor::matmul(&cls, &target.head_weight).unwrap();
        let mut manual = logits.clone();
        for (j, v) in manual.values_mut().iter_mut().enumerate() {
            *v += target.head_bias.values()[j];
        }
        assert!(gated.max_abs_diff(&manual) <= 1e-12);
    }

    #[test]
    fn gate_length_mismatch_is_rejected() {
        let mut rng = stream(9, "gate-len");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();
        let err = stochca_forward(&frozen, &cache, &[true, false], &image).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_hash_invariant_under_training() {
        let mut rng = stream(10, "frozen-hash");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let hash_before = frozen.param_hash();
        let mut head_rng = stream(11, "frozen-head");
        let mut target = frozen.replace_classifier(3, &mut head_rng).unwrap();
        let mut opt = AdamW::new(&target, optim_config()).unwrap();
        let mut gate_rng = stream(12, "frozen-gates");
        let mut counts = OpCounts::default();

        let images: Vec<Tensor> = (0..4).map(|_| rand_image(&mut rng)).collect();
        let batch = Batch {
            images: images.iter().collect(),
            labels: vec![0, 1, 2, 0],
        };
        for _ in 0..100 {
            train_step(
                &mut target,
                &frozen,
                &batch,
                0.3,
                &mut opt,
                &mut gate_rng,
                GateMode::PerBatch,
                &mut counts,
            )
            .unwrap();
        }
        assert_eq!(frozen.param_hash(), hash_before);
        assert_ne!(target.param_hash(), hash_before);
    }

    #[test]
    fn loss_decreases_on_separable_batch() {
        let mut rng = stream(13, "smoke");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let mut head_rng = stream(14, "smoke-head");
        let mut target = frozen.replace_classifier(2, &mut head_rng).unwrap();
        let mut opt = AdamW::new(
            &target,
            OptimConfig {
                learning_rate: 3e-3,
                total_steps: 50,
                warmup_steps: 5,
                ..optim_config()
            },
        )
        .unwrap();
        let mut gate_rng = stream(15, "smoke-gates");
        let mut counts = OpCounts::default();

        // Linearly separable toy batch: top half bright vs bottom half
        // bright, with a little per-image variation.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let mut values = vec![0.05; 16];
            let rows = if i % 2 == 0 { 0..8 } else { 8..16 };
            for idx in rows {
                values[idx] = 1.0;
            }
            values[(5 * i + 2) % 16] += 0.04 * (i as f64 + 1.0);
            images.push(Tensor::new(vec![1, 4, 4], values).unwrap());
            labels.push(i % 2);
        }
        let batch = Batch {
            images: images.iter().collect(),
            labels,
        };
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let loss = train_step(
                &mut target,
                &frozen,
                &batch,
                0.1,
                &mut opt,
                &mut gate_rng,
                GateMode::PerBatch,
                &mut counts,
            )
            .unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn infer_matches_all_false_gates_and_needs_no_cache() {
        let mut rng = stream(16, "infer");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();
        let a = infer(&frozen, &image).unwrap();
        let b = stochca_forward(&frozen, &cache, &[false; 3], &image).unwrap();
        assert_eq!(a.le_bytes(), b.le_bytes());
    }

    #[test]
    fn gradients_flow_to_queries_but_not_gated_keys() {
        // At a cross-attended layer the target's W_K/W_V are not part of
        // the graph: no gradient. W_Q and the MLP still receive one.
        let mut rng = stream(17, "gradflow");
        let frozen = ViTModel::init(config(), &mut rng).unwrap();
        let target = frozen.clone();
        let image = rand_image(&mut rng);
        let cache = extract_kv(&frozen, &image).unwrap();

        let mut tape = Tape::train();
        let (bound, hw, hb) = target.bind_with_head(&mut tape).unwrap();
        let gates = [true, false, true];
        let modes = gate_modes(&gates, &cache);
        let pass = forward_image(&mut tape, &bound, (hw, hb), &target.config, &image, &modes, false)
            .unwrap();
        let loss = tape.cross_entropy(pass.logits, &[1]).unwrap();
        tape.backward(loss).unwrap();

        for (l, block) in bound.blocks.iter().enumerate() {
            let kq = tape.grad(block.attn.w_q);
            let kk = tape.grad(block.attn.w_k);
            let kv = tape.grad(block.attn.w_v);
            let km = tape.grad(block.mlp_w1);
            assert!(kq.is_some(), "W_Q at layer {l}");
            assert!(km.is_some(), "MLP at layer {l}");
            if gates[l] {
                assert!(kk.is_none(), "W_K at gated layer {l}");
                assert!(kv.is_none(), "W_V at gated layer {l}");
            } else {
                assert!(kk.is_some(), "W_K at ungated layer {l}");
                assert!(kv.is_some(), "W_V at ungated layer {l}");
            }
        }
    }
}
