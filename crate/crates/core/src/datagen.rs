//! Deterministic synthetic multi-domain shape classification data.
//!
//! Classes are shapes (bars, crosses, discs, ...); domains restyle the
//! same shapes with different palettes, textures, and noise. Shape
//! geometry is drawn from a domain-independent stream, so two domains
//! generated from the same seed render the same geometry in different
//! styles. Everything is a pure function of `(spec, seed)`.

use crate::checkpoint::{load_container, save_container, Container};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::rng::{standard_normal, stream, to_hex};
use crate::stochca::Batch;
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHANNELS: usize = 3;

/// Shape identity; class semantics are independent of domain style.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    HBar,
    VBar,
    Cross,
    Disc,
    Diag,
    Frame,
}

impl ShapeClass {
    pub fn all() -> [ShapeClass; 6] {
        [
            ShapeClass::HBar,
            ShapeClass::VBar,
            ShapeClass::Cross,
            ShapeClass::Disc,
            ShapeClass::Diag,
            ShapeClass::Frame,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    Solid,
    Stripes,
}

/// Style knobs of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    pub texture: TextureMode,
    /// Gaussian pixel-noise standard deviation.
    pub noise: f64,
    /// Geometric jitter amplitude in pixels.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub style: StyleParams,
    /// Shared class set; labels index into this list.
    pub classes: Vec<ShapeClass>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Images with class labels and split tags; regeneration from
/// `(spec, seed)` is bit-identical.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub domain_id: String,
    pub classes: Vec<ShapeClass>,
    pub image_size: usize,
    pub seed: u64,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// SHA-256 over all image bytes, labels, and split tags.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.domain_id.as_bytes());
        for img in &self.images {
            hasher.update(img.le_bytes());
        }
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
        for &s in &self.splits {
            hasher.update([s as u8]);
        }
        to_hex(&hasher.finalize())
    }

    pub fn batch<'a>(&'a self, indices: &[usize]) -> Batch<'a> {
        Batch {
            images: indices.iter().map(|&i| &self.images[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Render the class shapes of `spec` at `image_size` with balanced
/// classes per split.
pub fn generate_domain(
    spec: &DomainSpec,
    image_size: usize,
    per_class: SplitSizes,
    seed: u64,
) -> Result<LabeledDataset> {
    if spec.classes.is_empty() {
        return Err(Error::config("domain needs at least one class"));
    }
    if per_class.train == 0 {
        return Err(Error::contract("n_per_class must be >= 1"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (split, count) in [
        (Split::Train, per_class.train),
        (Split::Val, per_class.val),
        (Split::Test, per_class.test),
    ] {
        for (class_idx, &class) in spec.classes.iter().enumerate() {
            for i in 0..count {
                // Geometry is domain-independent; style is per-domain.
                let geom_label = format!("geom/{}/{}/{}", split_tag(split), class_idx, i);
                let style_label = format!(
                    "style/{}/{}/{}/{}",
                    spec.domain_id,
                    split_tag(split),
                    class_idx,
                    i
                );
                let mut geom_rng = stream(seed, &geom_label);
                let mut style_rng = stream(seed, &style_label);
                images.push(render_image(
                    class,
                    &spec.style,
                    image_size,
                    &mut geom_rng,
                    &mut style_rng,
                )?);
                labels.push(class_idx);
                splits.push(split);
            }
        }
    }
    Ok(LabeledDataset {
        domain_id: spec.domain_id.clone(),
        classes: spec.classes.clone(),
        image_size,
        seed,
        images,
        labels,
        splits,
    })
}

fn render_image(
    class: ShapeClass,
    style: &StyleParams,
    size: usize,
    geom_rng: &mut ChaCha8Rng,
    style_rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut data = vec![0.0f64; CHANNELS * size * size];
    for c in 0..CHANNELS {
        let base = style.background[c];
        for v in &mut data[c * size * size..(c + 1) * size * size] {
            *v = base;
        }
    }

    // Geometry draws: fixed count so two domains consume identically.
    let ux: f64 = geom_rng.gen::<f64>() * 2.0 - 1.0;
    let uy: f64 = geom_rng.gen::<f64>() * 2.0 - 1.0;
    let us: f64 = geom_rng.gen::<f64>();
    let center = (size / 2) as i64;
    let cx = center + (ux * style.jitter).round() as i64;
    let cy = center + (uy * style.jitter).round() as i64;
    let half = ((size as f64) * (0.22 + 0.10 * us)).round() as i64;
    let thickness = ((size / 8).max(1)) as i64;

    let stripe_phase: i64 = match style.texture {
        TextureMode::Solid => 0,
        TextureMode::Stripes => style_rng.gen_range(0..4),
    };

    let in_shape = |x: i64, y: i64| -> bool {
        let dx = x - cx;
        let dy = y - cy;
        match class {
            ShapeClass::HBar => dy.abs() < thickness && dx.abs() <= half,
            ShapeClass::VBar => dx.abs() < thickness && dy.abs() <= half,
            ShapeClass::Cross => {
                (dy.abs() < thickness && dx.abs() <= half)
                    || (dx.abs() < thickness && dy.abs() <= half)
            }
            ShapeClass::Disc => dx * dx + dy * dy <= half * half,
            ShapeClass::Diag => (dx - dy).abs() < thickness && dx.abs() <= half && dy.abs() <= half,
            ShapeClass::Frame => {
                let m = dx.abs().max(dy.abs());
                m <= half && m > half - thickness
            }
        }
    };

    for y in 0..size as i64 {
        for x in 0..size as i64 {
            if !in_shape(x, y) {
                continue;
            }
            let tex = match style.texture {
                TextureMode::Solid => 1.0,
                TextureMode::Stripes => {
                    if ((x + y + stripe_phase) / 2) % 2 == 0 {
                        1.0
                    } else {
                        0.45
                    }
                }
            };
            for c in 0..CHANNELS {
                data[c * size * size + (y as usize) * size + x as usize] =
                    style.foreground[c] * tex;
            }
        }
    }

    if style.noise > 0.0 {
        for v in &mut data {
            *v += standard_normal(style_rng) * style.noise;
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![CHANNELS, size, size], data)
}

/// Per-class stratified subsample of the train split; val/test are
/// untouched. `rate = 1.0` is the identity.
pub fn subsample(ds: &LabeledDataset, rate: f64, seed: u64) -> Result<LabeledDataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Contract(format!("sampling rate {rate} outside (0, 1]")));
    }
    if rate == 1.0 {
        return Ok(ds.clone());
    }
    let mut keep = vec![false; ds.len()];
    for i in 0..ds.len() {
        if ds.splits[i] != Split::Train {
            keep[i] = true;
        }
    }
    for class in 0..ds.num_classes() {
        let class_train: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.splits[i] == Split::Train && ds.labels[i] == class)
            .collect();
        let n_keep = (rate * class_train.len() as f64).round() as usize;
        if n_keep == 0 {
            return Err(Error::Contract(format!(
                "class {class} empty after subsampling at rate {rate}"
            )));
        }
        let mut rng = stream(seed, &format!("subsample/{}/{class}", ds.domain_id));
        let mut shuffled = class_train.clone();
        shuffled.shuffle(&mut rng);
        let mut selected: Vec<usize> = shuffled[..n_keep].to_vec();
        selected.sort_unstable();
        for i in selected {
            keep[i] = true;
        }
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for i in 0..ds.len() {
        if keep[i] {
            images.push(ds.images[i].clone());
            labels.push(ds.labels[i]);
            splits.push(ds.splits[i]);
        }
    }
    Ok(LabeledDataset {
        domain_id: ds.domain_id.clone(),
        classes: ds.classes.clone(),
        image_size: ds.image_size,
        seed: ds.seed,
        images,
        labels,
        splits,
    })
}

/// Stratified partition of one split's indices into (main, holdout).
/// Every class keeps at least one item on each side when possible.
pub fn stratified_holdout(
    ds: &LabeledDataset,
    split: Split,
    holdout_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::Contract(format!(
            "holdout fraction {holdout_frac} outside [0, 1)"
        )));
    }
    let mut main = Vec::new();
    let mut holdout = Vec::new();
    for class in 0..ds.num_classes() {
        let mut class_idx: Vec<usize> = ds
            .split_indices(split)
            .into_iter()
            .filter(|&i| ds.labels[i] == class)
            .collect();
        let mut rng = stream(seed, &format!("holdout/{}/{class}", ds.domain_id));
        class_idx.shuffle(&mut rng);
        let mut n_hold = (holdout_frac * class_idx.len() as f64).round() as usize;
        if holdout_frac > 0.0 && n_hold == 0 && class_idx.len() > 1 {
            n_hold = 1;
        }
        if n_hold >= class_idx.len() && !class_idx.is_empty() {
            n_hold = class_idx.len() - 1;
        }
        holdout.extend_from_slice(&class_idx[..n_hold]);
        main.extend_from_slice(&class_idx[n_hold..]);
    }
    main.sort_unstable();
    holdout.sort_unstable();
    Ok((main, holdout))
}

/// Deterministic epoch-shuffled batch order over a fixed index set.
pub struct BatchOrder {
    indices: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    pub fn new(indices: Vec<usize>, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("batch order needs a non-empty index set"));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let mut order = BatchOrder { indices, pos: usize::MAX, batch_size, rng };
        order.reshuffle();
        Ok(order)
    }

    fn reshuffle(&mut self) {
        self.indices.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Next batch of indices; reshuffles at epoch boundaries and never
    /// emits a partial batch (unless the dataset is smaller than one
    /// batch).
    pub fn next_batch(&mut self) -> Vec<usize> {
        let take = self.batch_size.min(self.indices.len());
        if self.pos + take > self.indices.len() {
            self.reshuffle();
        }
        let batch = self.indices[self.pos..self.pos + take].to_vec();
        self.pos += take;
        batch
    }
}

/// Train a fresh model on the source task with pure self-attention and
/// return it; the result plays the frozen reference for every downstream
/// experiment.
pub fn pretrain_toy(
    config: &ViTConfig,
    source: &LabeledDataset,
    steps: usize,
    seed: u64,
) -> Result<ViTModel> {
    let optim = OptimConfig {
        learning_rate: 3e-3,
        weight_decay: 0.01,
        warmup_steps: (steps / 10).max(1),
        total_steps: steps,
        batch_size: 16,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        max_grad_norm: Some(1.0),
    };
    pretrain_toy_with(config, source, &optim, seed)
}

pub fn pretrain_toy_with(
    config: &ViTConfig,
    source: &LabeledDataset,
    optim: &OptimConfig,
    seed: u64,
) -> Result<ViTModel> {
    if config.num_classes != source.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, source task has {}",
            config.num_classes,
            source.num_classes()
        )));
    }
    if config.image_size != source.image_size || config.channels != CHANNELS {
        return Err(Error::config("model and source dataset geometry disagree"));
    }
    let mut init_rng = stream(seed, "pretrain/init");
    let mut model = ViTModel::init(config.clone(), &mut init_rng)?;
    let mut opt = crate::optim::AdamW::new(&model, optim.clone())?;
    let mut order = BatchOrder::new(
        source.split_indices(Split::Train),
        optim.batch_size,
        stream(seed, "pretrain/order"),
    )?;
    let mut counts = crate::analysis::OpCounts::default();
    for _ in 0..optim.total_steps {
        let idx = order.next_batch();
        let batch = source.batch(&idx);
        crate::baselines::ft_train_step(&mut model, &batch, &mut opt, &mut counts)?;
    }
    Ok(model)
}

/// Fraction of a split classified correctly under pure self-attention.
pub fn accuracy(model: &ViTModel, ds: &LabeledDataset, split: Split) -> Result<f64> {
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(Error::contract("empty evaluation split"));
    }
    let mut correct = 0usize;
    for &i in &indices {
        if crate::vit::predict(&ds.images[i], model)? == ds.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

const DATASET_KIND: &str = "labeled-dataset";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    domain_id: String,
    classes: Vec<ShapeClass>,
    image_size: usize,
    seed: u64,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

/// Export a dataset: JSON manifest plus one little-endian blob holding
/// all images as a `[n, channels, size, size]` tensor.
pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let n = ds.len();
    let per = CHANNELS * ds.image_size * ds.image_size;
    let mut all = Vec::with_capacity(n * per);
    for img in &ds.images {
        all.extend_from_slice(img.values());
    }
    let images = Tensor::new(vec![n, CHANNELS, ds.image_size, ds.image_size], all)?;
    let meta = DatasetMeta {
        domain_id: ds.domain_id.clone(),
        classes: ds.classes.clone(),
        image_size: ds.image_size,
        seed: ds.seed,
        labels: ds.labels.clone(),
        splits: ds.splits.clone(),
    };
    let container = Container {
        kind: DATASET_KIND.into(),
        meta: serde_json::to_value(&meta)?,
        tensors: vec![("images".into(), images)],
    };
    save_container(path, &container)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let container = load_container(path)?;
    if container.kind != DATASET_KIND {
        return Err(Error::corrupt(format!(
            "container kind {:?}, expected {DATASET_KIND:?}",
            container.kind
        )));
    }
    let meta: DatasetMeta =
        serde_json::from_value(container.meta).map_err(|e| Error::corrupt(e.to_string()))?;
    let (_, images_tensor) = container
        .tensors
        .into_iter()
        .find(|(name, _)| name == "images")
        .ok_or_else(|| Error::corrupt("missing images tensor"))?;
    let n = meta.labels.len();
    let per = CHANNELS * meta.image_size * meta.image_size;
    if images_tensor.numel() != n * per || meta.splits.len() != n {
        return Err(Error::corrupt("dataset manifest and blob disagree"));
    }
    let values = images_tensor.values();
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        images.push(Tensor::new(
            vec![CHANNELS, meta.image_size, meta.image_size],
            values[i * per..(i + 1) * per].to_vec(),
        )?);
    }
    Ok(LabeledDataset {
        domain_id: meta.domain_id,
        classes: meta.classes,
        image_size: meta.image_size,
        seed: meta.seed,
        images,
        labels: meta.labels,
        splits: meta.splits,
    })
}
