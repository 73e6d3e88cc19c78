//! Comparison methods: vanilla fine-tuning, the activation-similarity
//! regularizer, and the dual-path ensemble variants.

use crate::analysis::OpCounts;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::stochca::{extract_kv, stochca_forward, Batch};
use crate::tensor::{Tape, Tensor, VarId};
use crate::vit::{collect_qkv, forward, forward_image, AttnSource, ViTModel};
use serde::{Deserialize, Serialize};

/// Training/inference path selector. The tag determines both
/// unambiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Vanilla fine-tuning: pure self-attention, all parameters updated.
    Ft,
    /// Fine-tuning plus an L2 penalty tying Q/K/V activations to the
    /// frozen model's.
    L2Reg,
    /// Dual-path ensemble: SA and CA paths averaged at training and
    /// inference.
    Ftca,
    /// Trained like `Ftca`, deployed with the SA path only.
    FtcaOnlySa,
    /// Stochastic per-layer SA/CA gating.
    Stochca,
}

impl BaselineKind {
    /// Display names used in report tables.
    pub fn display(&self) -> &'static str {
        match self {
            BaselineKind::Ft => "FT",
            BaselineKind::L2Reg => "L2-Reg",
            BaselineKind::Ftca => "FT+CA",
            BaselineKind::FtcaOnlySa => "FT+CA (only SA)",
            BaselineKind::Stochca => "StochCA",
        }
    }

    pub fn all() -> [BaselineKind; 5] {
        [
            BaselineKind::Ft,
            BaselineKind::L2Reg,
            BaselineKind::Ftca,
            BaselineKind::FtcaOnlySa,
            BaselineKind::Stochca,
        ]
    }

    /// Whether inference requires the frozen model.
    pub fn inference_needs_frozen(&self) -> bool {
        matches!(self, BaselineKind::Ftca)
    }
}

/// How the dual-path ensemble combines its two paths during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtcaLossMode {
    /// One cross-entropy on the averaged logits.
    #[default]
    AvgLogits,
    /// Mean of the two per-path cross-entropies.
    SumLosses,
}

/// Vanilla fine-tuning step: pure self-attention forward, cross-entropy,
/// update of every target parameter. The frozen model is never consulted.
pub fn ft_train_step(
    target: &mut ViTModel,
    batch: &Batch<'_>,
    opt: &mut AdamW,
    counts: &mut OpCounts,
) -> Result<f64> {
    sa_path_train_step(target, None, batch, opt, counts)
}

/// Fine-tuning step with the activation penalty added to the loss.
pub fn l2reg_train_step(
    target: &mut ViTModel,
    frozen: &ViTModel,
    batch: &Batch<'_>,
    lambda: f64,
    opt: &mut AdamW,
    counts: &mut OpCounts,
) -> Result<f64> {
    sa_path_train_step(target, Some((frozen, lambda)), batch, opt, counts)
}

fn sa_path_train_step(
    target: &mut ViTModel,
    penalty: Option<(&ViTModel, f64)>,
    batch: &Batch<'_>,
    opt: &mut AdamW,
    counts: &mut OpCounts,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut tape = Tape::train();
    let (bound, hw, hb) = target.bind_with_head(&mut tape)?;
    let loss = build_sa_loss(&mut tape, &bound, (hw, hb), target, penalty, batch, counts)?;
    let loss_value = tape.value(loss).values()[0];
    tape.backward(loss)?;
    let ids = bound.param_ids(hw, hb);
    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
    opt.apply(target, &grads)?;
    Ok(loss_value)
}

/// Cross-entropy of a pure-SA forward over the batch, plus the optional
/// activation penalty. Shared by the training step and the plain loss
/// surface so both compute identical values.
fn build_sa_loss(
    tape: &mut Tape,
    bound: &crate::vit::BoundViT,
    head: (VarId, VarId),
    target: &ViTModel,
    penalty: Option<(&ViTModel, f64)>,
    batch: &Batch<'_>,
    counts: &mut OpCounts,
) -> Result<VarId> {
    if let Some((frozen, _)) = penalty {
        if !frozen.config.same_backbone(&target.config) {
            return Err(Error::config(
                "penalty requires frozen and target models with a shared architecture",
            ));
        }
    }
    let depth = target.config.depth;
    let modes = vec![AttnSource::SelfAttn; depth];
    let mut logit_rows = Vec::with_capacity(batch.len());
    let mut penalty_terms: Vec<VarId> = Vec::new();
    let mut tokens = 0usize;

    for image in &batch.images {
        let before = tape.attn_evals;
        let pass = forward_image(tape, bound, head, &target.config, image, &modes, penalty.is_some())?;
        counts.target_attn_evals += tape.attn_evals - before;
        counts.target_forwards += 1;
        logit_rows.push(pass.logits);

        if let Some((frozen, _)) = penalty {
            let frozen_acts = collect_qkv(frozen, image)?;
            counts.frozen_forwards += 1;
            counts.frozen_attn_evals += depth as u64;
            for (trace, (fq, fk, fv)) in pass.traces.iter().zip(&frozen_acts) {
                tokens = fq.shape()[0];
                for (t_id, f_val) in [(trace.q, fq), (trace.k, fk), (trace.v, fv)] {
                    let f_id = tape.leaf(f_val)?;
                    let diff = tape.sub(t_id, f_id)?;
                    let sq = tape.hadamard(diff, diff)?;
                    penalty_terms.push(tape.sum_all(sq)?);
                }
            }
        }
    }

    let logits = tape.concat_rows(&logit_rows)?;
    let ce = tape.cross_entropy(logits, &batch.labels)?;
    match penalty {
        None => Ok(ce),
        Some((_, lambda)) => {
            let mut total = penalty_terms[0];
            for &term in &penalty_terms[1..] {
                total = tape.add(total, term)?;
            }
            // Mean over images, layers, the three quantities, and tokens
            // of the squared row distance.
            let denom = (batch.len() * depth * 3 * tokens) as f64;
            let scaled = tape.scale(total, lambda / denom)?;
            tape.add(ce, scaled)
        }
    }
}

/// Task cross-entropy plus `lambda` times the mean squared distance
/// between target and frozen Q/K/V activations. Returns a scalar tensor;
/// no gradients are produced.
pub fn l2reg_loss(
    target: &ViTModel,
    frozen: &ViTModel,
    batch: &Batch<'_>,
    lambda: f64,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut counts = OpCounts::default();
    let mut tape = Tape::eval();
    let (bound, hw, hb) = target.bind_with_head(&mut tape)?;
    let loss = build_sa_loss(
        &mut tape,
        &bound,
        (hw, hb),
        target,
        Some((frozen, lambda)),
        batch,
        &mut counts,
    )?;
    Ok(tape.value(loss).detached())
}

/// Dual-path training step: every image runs an all-SA pass and an
/// all-CA pass against the frozen cache; the two paths share parameters.
pub fn ftca_train_step(
    target: &mut ViTModel,
    frozen: &ViTModel,
    batch: &Batch<'_>,
    mode: FtcaLossMode,
    opt: &mut AdamW,
    counts: &mut OpCounts,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if !frozen.config.same_backbone(&target.config) {
        return Err(Error::config(
            "frozen and target models must share an architecture",
        ));
    }
    let depth = target.config.depth;
    let sa_modes = vec![AttnSource::SelfAttn; depth];

    let mut tape = Tape::train();
    let (bound, hw, hb) = target.bind_with_head(&mut tape)?;
    let mut sa_rows = Vec::with_capacity(batch.len());
    let mut ca_rows = Vec::with_capacity(batch.len());
    for image in &batch.images {
        let cache = extract_kv(frozen, image)?;
        counts.frozen_forwards += 1;
        counts.frozen_attn_evals += depth as u64;
        cache.validate_for(target)?;

        let before = tape.attn_evals;
        let sa = forward_image(&mut tape, &bound, (hw, hb), &target.config, image, &sa_modes, false)?;
        let ca_modes: Vec<AttnSource<'_>> = cache
            .layers
            .iter()
            .map(|kv| AttnSource::Cross { k: &kv.k, v: &kv.v })
            .collect();
        let ca = forward_image(&mut tape, &bound, (hw, hb), &target.config, image, &ca_modes, false)?;
        counts.target_attn_evals += tape.attn_evals - before;
        counts.target_forwards += 2;
        sa_rows.push(sa.logits);
        ca_rows.push(ca.logits);
    }

    let loss = match mode {
        FtcaLossMode::AvgLogits => {
            let mut avg_rows = Vec::with_capacity(batch.len());
            for (&sa, &ca) in sa_rows.iter().zip(&ca_rows) {
                let sum = tape.add(sa, ca)?;
                avg_rows.push(tape.scale(sum, 0.5)?);
            }
            let logits = tape.concat_rows(&avg_rows)?;
            tape.cross_entropy(logits, &batch.labels)?
        }
        FtcaLossMode::SumLosses => {
            let sa_logits = tape.concat_rows(&sa_rows)?;
            let ca_logits = tape.concat_rows(&ca_rows)?;
            let ce_sa = tape.cross_entropy(sa_logits, &batch.labels)?;
            let ce_ca = tape.cross_entropy(ca_logits, &batch.labels)?;
            let sum = tape.add(ce_sa, ce_ca)?;
            tape.scale(sum, 0.5)?
        }
    };
    let loss_value = tape.value(loss).values()[0];
    tape.backward(loss)?;
    let ids = bound.param_ids(hw, hb);
    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
    opt.apply(target, &grads)?;
    Ok(loss_value)
}

/// Ensemble inference: average of the all-SA and all-CA logits. Requires
/// the frozen model at inference time.
pub fn ftca_forward(target: &ViTModel, frozen: &ViTModel, image: &Tensor) -> Result<Tensor> {
    let mut counts = OpCounts::default();
    ftca_forward_counted(target, frozen, image, &mut counts)
}

pub fn ftca_forward_counted(
    target: &ViTModel,
    frozen: &ViTModel,
    image: &Tensor,
    counts: &mut OpCounts,
) -> Result<Tensor> {
    if !frozen.config.same_backbone(&target.config) {
        return Err(Error::config(
            "frozen and target models must share an architecture",
        ));
    }
    let depth = target.config.depth;
    let cache = extract_kv(frozen, image)?;
    counts.frozen_forwards += 1;
    counts.frozen_attn_evals += depth as u64;
    let sa = forward(image, target)?;
    let ca = stochca_forward(target, &cache, &vec![true; depth], image)?;
    counts.target_attn_evals += 2 * depth as u64;
    counts.target_forwards += 2;
    let values: Vec<f64> = sa
        .values()
        .iter()
        .zip(ca.values())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::new(sa.shape().to_vec(), values)
}

/// Deployment variant of the dual-path model: pure self-attention only,
/// no frozen model required.
pub fn ftca_onlysa_infer(target: &ViTModel, image: &Tensor) -> Result<Tensor> {
    forward(image, target)
}
