//! Experiment orchestration: the transfer-learning protocol (subsample,
//! select on validation, retrain on train+val, test), leave-one-domain-out
//! domain generalization, and the cross-attention probability sweep.

pub mod report;

pub use report::{
    render_dg_text, render_run_text, render_sweep_text, render_tl_grid_csv, render_tl_grid_text,
    write_string, CellStats, DomainOutcome, RunReport, SeedOutcome, SweepReport, TlGridReport,
};

use crate::analysis::OpCounts;
use crate::baselines::{
    ft_train_step, ftca_forward_counted, ftca_train_step, l2reg_train_step, BaselineKind,
    FtcaLossMode,
};
use crate::datagen::{
    generate_domain, stratified_holdout, subsample, BatchOrder, DomainSpec, LabeledDataset,
    ShapeClass, Split, SplitSizes, StyleParams, TextureMode,
};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::stream;
use crate::stochca::{draw_gates, infer_counted, train_step, Batch, GateMode};
use crate::tensor::Tensor;
use crate::vit::{argmax, InitScheme, ViTConfig, ViTModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Tl,
    Dg,
    Ablation,
}

/// Dataset and pretraining description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset_seed: u64,
    /// Source (pretraining) task domain; its class set sizes the frozen
    /// model's classifier.
    pub source: DomainSpec,
    pub source_per_class: SplitSizes,
    pub pretrain: OptimConfig,
    /// Transfer-learning target domain.
    pub target: DomainSpec,
    pub target_per_class: SplitSizes,
    /// Domain-generalization domains (>= 3 for leave-one-out).
    pub dg_domains: Vec<DomainSpec>,
    pub dg_per_class: SplitSizes,
}

fn default_p_grid() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7]
}

fn default_lambda_grid() -> Vec<f64> {
    vec![0.1, 1.0]
}

fn default_rate() -> f64 {
    1.0
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Full experiment description; everything needed to reproduce a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub method: BaselineKind,
    /// Fixed cross-attention probability; when absent, selected from
    /// `p_grid` on the validation split.
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    /// Fixed activation-penalty weight; when absent, selected from
    /// `lambda_grid`.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_rate")]
    pub sampling_rate: f64,
    pub seeds: Vec<u64>,
    pub optimizer: OptimConfig,
    pub model: ViTConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub ftca_loss: FtcaLossMode,
    /// Fraction of the (sampled) training data held out for
    /// hyperparameter selection.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Evaluate validation accuracy every this many steps during
    /// selection; end-of-training only when absent.
    #[serde(default)]
    pub val_cadence: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.data.pretrain.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sampling rate {} outside (0, 1]",
                self.sampling_rate
            )));
        }
        if let Some(p) = self.p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p {p} outside [0, 1]")));
            }
        }
        for &p in &self.p_grid {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p grid value {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.model.num_classes != self.data.source.classes.len() {
            return Err(Error::Config(format!(
                "model has {} classes but the source task has {}",
                self.model.num_classes,
                self.data.source.classes.len()
            )));
        }
        if self.protocol == Protocol::Dg && self.data.dg_domains.len() < 3 {
            return Err(Error::Contract(format!(
                "leave-one-domain-out needs >= 3 domains, got {}",
                self.data.dg_domains.len()
            )));
        }
        for spec in &self.data.dg_domains {
            if spec.classes != self.data.dg_domains[0].classes {
                return Err(Error::config("all DG domains must share one class set"));
            }
        }
        Ok(())
    }
}

/// Desk-scale default experiment: a six-shape source task and four-shape
/// target tasks in restyled domains, sized so the full method-by-rate
/// grid runs in minutes on one CPU core.
pub fn default_run_config() -> RunConfig {
    let four_classes = vec![
        ShapeClass::HBar,
        ShapeClass::VBar,
        ShapeClass::Cross,
        ShapeClass::Disc,
    ];
    let model = ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        depth: 3,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 6,
        layer_norm_eps: 1e-6,
        init: InitScheme::default(),
    };
    RunConfig {
        protocol: Protocol::Tl,
        method: BaselineKind::Stochca,
        p: None,
        p_grid: default_p_grid(),
        lambda: None,
        lambda_grid: default_lambda_grid(),
        sampling_rate: 1.0,
        seeds: vec![0, 1, 2, 3, 4],
        optimizer: OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 30,
            total_steps: 300,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        },
        model,
        data: DataConfig {
            dataset_seed: 2024,
            source: DomainSpec {
                domain_id: "source".into(),
                style: StyleParams {
                    background: [0.20, 0.24, 0.30],
                    foreground: [0.85, 0.78, 0.55],
                    texture: TextureMode::Solid,
                    noise: 0.05,
                    jitter: 2.0,
                },
                classes: ShapeClass::all().to_vec(),
            },
            source_per_class: SplitSizes { train: 150, val: 0, test: 30 },
            pretrain: OptimConfig {
                learning_rate: 1.5e-3,
                weight_decay: 0.01,
                warmup_steps: 100,
                total_steps: 800,
                batch_size: 32,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                max_grad_norm: Some(1.0),
            },
            target: DomainSpec {
                domain_id: "target".into(),
                style: StyleParams {
                    background: [0.30, 0.18, 0.24],
                    foreground: [0.60, 0.85, 0.70],
                    texture: TextureMode::Stripes,
                    noise: 0.10,
                    jitter: 2.0,
                },
                classes: four_classes.clone(),
            },
            target_per_class: SplitSizes { train: 60, val: 0, test: 40 },
            dg_domains: vec![
                DomainSpec {
                    domain_id: "photo".into(),
                    style: StyleParams {
                        background: [0.45, 0.35, 0.25],
                        foreground: [0.90, 0.85, 0.70],
                        texture: TextureMode::Solid,
                        noise: 0.06,
                        jitter: 2.0,
                    },
                    classes: four_classes.clone(),
                },
                DomainSpec {
                    domain_id: "cartoon".into(),
                    style: StyleParams {
                        background: [0.15, 0.55, 0.60],
                        foreground: [0.95, 0.35, 0.25],
                        texture: TextureMode::Solid,
                        noise: 0.02,
                        jitter: 2.0,
                    },
                    classes: four_classes.clone(),
                },
                DomainSpec {
                    domain_id: "sketch".into(),
                    style: StyleParams {
                        background: [0.88, 0.88, 0.84],
                        foreground: [0.12, 0.10, 0.15],
                        texture: TextureMode::Stripes,
                        noise: 0.10,
                        jitter: 2.0,
                    },
                    classes: four_classes,
                },
            ],
            dg_per_class: SplitSizes { train: 40, val: 10, test: 25 },
        },
        gate_mode: GateMode::default(),
        ftca_loss: FtcaLossMode::default(),
        val_fraction: default_val_fraction(),
        val_cadence: None,
    }
}

/// Generated datasets plus the pretrained frozen model.
#[derive(Clone)]
pub struct RunEnv {
    pub frozen: ViTModel,
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub dg: Vec<LabeledDataset>,
}

/// Generate all datasets and pretrain the frozen model (unless one is
/// supplied, e.g. from a checkpoint).
pub fn prepare_env(cfg: &RunConfig, frozen: Option<ViTModel>) -> Result<RunEnv> {
    cfg.validate()?;
    let size = cfg.model.image_size;
    let seed = cfg.data.dataset_seed;
    let source = generate_domain(&cfg.data.source, size, cfg.data.source_per_class, seed)?;
    let target = generate_domain(&cfg.data.target, size, cfg.data.target_per_class, seed)?;
    let dg = cfg
        .data
        .dg_domains
        .iter()
        .map(|d| generate_domain(d, size, cfg.data.dg_per_class, seed))
        .collect::<Result<Vec<_>>>()?;
    let frozen = match frozen {
        Some(model) => {
            if !model.config.same_backbone(&cfg.model) {
                return Err(Error::config(
                    "supplied frozen model does not match the configured architecture",
                ));
            }
            model
        }
        None => crate::datagen::pretrain_toy_with(&cfg.model, &source, &cfg.data.pretrain, seed)?,
    };
    Ok(RunEnv { frozen, source, target, dg })
}

/// Phase-tagged dataset access accounting; proves protocol isolation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    /// `"phase:domain/split" -> items read`.
    pub entries: BTreeMap<String, u64>,
}

impl AccessLog {
    pub fn record(&mut self, phase: &str, tag: &str, n: u64) {
        *self.entries.entry(format!("{phase}:{tag}")).or_insert(0) += n;
    }

    pub fn merge(&mut self, other: &AccessLog) {
        for (k, v) in &other.entries {
            *self.entries.entry(k.clone()).or_insert(0) += v;
        }
    }

    /// Total reads whose key matches both filters.
    pub fn total_matching(&self, phase: &str, tag_substr: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(&format!("{phase}:")) && k.contains(tag_substr))
            .map(|(_, v)| v)
            .sum()
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn view_tag(ds: &LabeledDataset, split: Split) -> String {
    format!("{}/{}", ds.domain_id, split_name(split))
}

/// A pool of dataset slices acting as one index space, so a training run
/// can draw batches across several source domains.
struct Pool<'a> {
    views: Vec<(&'a LabeledDataset, Vec<usize>, String)>,
    /// Flat index -> (view, local index).
    flat: Vec<(usize, usize)>,
}

impl<'a> Pool<'a> {
    fn new(views: Vec<(&'a LabeledDataset, Vec<usize>, String)>) -> Self {
        let mut flat = Vec::new();
        for (v, (_, idx, _)) in views.iter().enumerate() {
            for (i, _) in idx.iter().enumerate() {
                flat.push((v, i));
            }
        }
        Pool { views, flat }
    }

    fn len(&self) -> usize {
        self.flat.len()
    }

    fn batch(&self, flat_indices: &[usize], access: &mut AccessLog, phase: &str) -> Batch<'a> {
        let mut images = Vec::with_capacity(flat_indices.len());
        let mut labels = Vec::with_capacity(flat_indices.len());
        for &f in flat_indices {
            let (v, i) = self.flat[f];
            let (ds, idx, tag) = &self.views[v];
            let row = idx[i];
            images.push(&ds.images[row]);
            labels.push(ds.labels[row]);
            access.record(phase, tag, 1);
        }
        Batch { images, labels }
    }
}

/// Method hyperparameter under selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HyperParam {
    None,
    P(f64),
    Lambda(f64),
}

impl HyperParam {
    pub fn label(&self) -> String {
        match self {
            HyperParam::None => "-".into(),
            HyperParam::P(p) => format!("p={p}"),
            HyperParam::Lambda(l) => format!("lambda={l}"),
        }
    }

    fn sort_key(&self) -> f64 {
        match self {
            HyperParam::None => 0.0,
            HyperParam::P(p) => *p,
            HyperParam::Lambda(l) => *l,
        }
    }
}

fn candidate_grid(cfg: &RunConfig) -> Vec<HyperParam> {
    match cfg.method {
        BaselineKind::Stochca => match cfg.p {
            Some(p) => vec![HyperParam::P(p)],
            None => cfg.p_grid.iter().map(|&p| HyperParam::P(p)).collect(),
        },
        BaselineKind::L2Reg => match cfg.lambda {
            Some(l) => vec![HyperParam::Lambda(l)],
            None => cfg.lambda_grid.iter().map(|&l| HyperParam::Lambda(l)).collect(),
        },
        _ => vec![HyperParam::None],
    }
}

struct TrainOutcome {
    model: ViTModel,
    best_val: f64,
}

/// One training run of `cfg.method` with hyperparameter `hp`, starting
/// from `init`, over the pooled `train` data. Validation accuracy is
/// measured on `val` at the configured cadence; the best value is
/// returned alongside the final model.
#[allow(clippy::too_many_arguments)]
fn train_one(
    cfg: &RunConfig,
    frozen: &ViTModel,
    init: &ViTModel,
    hp: HyperParam,
    train: &Pool<'_>,
    val: Option<&Pool<'_>>,
    seed: u64,
    phase_label: &str,
    counts: &mut OpCounts,
    access: &mut AccessLog,
) -> Result<TrainOutcome> {
    let mut model = init.clone();
    let mut opt = AdamW::new(&model, cfg.optimizer.clone())?;
    let mut order = BatchOrder::new(
        (0..train.len()).collect(),
        cfg.optimizer.batch_size,
        stream(seed, &format!("order/{phase_label}")),
    )?;
    let mut gate_rng = stream(seed, &format!("gates/{phase_label}"));
    let total = cfg.optimizer.total_steps;
    let cadence = cfg.val_cadence.unwrap_or(total).max(1);
    let mut best_val = f64::NEG_INFINITY;

    for step in 0..total {
        let flat = order.next_batch();
        let batch = train.batch(&flat, access, "train");
        match cfg.method {
            BaselineKind::Ft => {
                ft_train_step(&mut model, &batch, &mut opt, counts)?;
            }
            BaselineKind::L2Reg => {
                let lambda = match hp {
                    HyperParam::Lambda(l) => l,
                    _ => return Err(Error::contract("L2-Reg needs a lambda hyperparameter")),
                };
                l2reg_train_step(&mut model, frozen, &batch, lambda, &mut opt, counts)?;
            }
            BaselineKind::Ftca | BaselineKind::FtcaOnlySa => {
                ftca_train_step(&mut model, frozen, &batch, cfg.ftca_loss, &mut opt, counts)?;
            }
            BaselineKind::Stochca => {
                let p = match hp {
                    HyperParam::P(p) => p,
                    _ => return Err(Error::contract("gated training needs a probability")),
                };
                // Consume the gate stream uniformly, but skip extraction
                // entirely at p = 0 equivalence is exercised elsewhere.
                train_step(
                    &mut model,
                    frozen,
                    &batch,
                    p,
                    &mut opt,
                    &mut gate_rng,
                    cfg.gate_mode,
                    counts,
                )?;
            }
        }
        let at_cadence = (step + 1) % cadence == 0 || step + 1 == total;
        if at_cadence {
            if let Some(val_pool) = val {
                let acc =
                    pool_accuracy(cfg.method, &model, frozen, val_pool, counts, access, "select")?;
                if acc > best_val {
                    best_val = acc;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        best_val: if best_val.is_finite() { best_val } else { 0.0 },
    })
}

/// Accuracy of the method's deployed inference path over a pool.
fn pool_accuracy(
    method: BaselineKind,
    target: &ViTModel,
    frozen: &ViTModel,
    pool: &Pool<'_>,
    counts: &mut OpCounts,
    access: &mut AccessLog,
    phase: &str,
) -> Result<f64> {
    if pool.len() == 0 {
        return Err(Error::contract("empty evaluation pool"));
    }
    let mut correct = 0usize;
    for f in 0..pool.len() {
        let (v, i) = pool.flat[f];
        let (ds, idx, tag) = &pool.views[v];
        let row = idx[i];
        access.record(phase, tag, 1);
        let image: &Tensor = &ds.images[row];
        let logits = if method.inference_needs_frozen() {
            ftca_forward_counted(target, frozen, image, counts)?
        } else {
            infer_counted(target, image, counts)?
        };
        if argmax(logits.values()) == ds.labels[row] {
            correct += 1;
        }
    }
    Ok(correct as f64 / pool.len() as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Transfer learning for one method at one sampling rate: subsample the
/// target train split, select the method hyperparameter on a held-out
/// fraction, retrain on the combined data, and report test accuracy over
/// seeds. Also returns the final per-seed models for analysis.
pub fn run_transfer_full(cfg: &RunConfig, env: &RunEnv) -> Result<(RunReport, Vec<ViTModel>)> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let target_classes = env.target.num_classes();
    let candidates = candidate_grid(cfg);

    let mut per_seed = Vec::new();
    let mut models = Vec::new();
    let mut counts = OpCounts::default();
    let mut access = AccessLog::default();

    for &seed in &cfg.seeds {
        let sub = subsample(&env.target, cfg.sampling_rate, seed)?;
        let (sel_idx, val_idx) =
            stratified_holdout(&sub, Split::Train, cfg.val_fraction, seed)?;
        let mut head_rng = stream(seed, "head-init");
        let init = env.frozen.replace_classifier(target_classes, &mut head_rng)?;

        // Selection phase: train each candidate on the reduced train
        // portion, score on the held-out validation items. Methods
        // without a hyperparameter have nothing to select and skip
        // straight to the final training.
        let has_grid = candidates != [HyperParam::None];
        let (selected, mut selected_val) = if has_grid {
            let mut scored: Vec<(HyperParam, f64)> = Vec::new();
            for &hp in &candidates {
                let train_pool = Pool::new(vec![(
                    &sub,
                    sel_idx.clone(),
                    view_tag(&sub, Split::Train),
                )]);
                let val_pool = Pool::new(vec![(
                    &sub,
                    val_idx.clone(),
                    view_tag(&sub, Split::Train),
                )]);
                let outcome = train_one(
                    cfg,
                    &env.frozen,
                    &init,
                    hp,
                    &train_pool,
                    Some(&val_pool),
                    seed,
                    "select",
                    &mut counts,
                    &mut access,
                )?;
                scored.push((hp, outcome.best_val));
            }
            select_best(&scored)
        } else {
            (HyperParam::None, f64::NAN)
        };

        // Retrain on train+val with the selected hyperparameter, then
        // evaluate once on the test split.
        let full_idx = sub.split_indices(Split::Train);
        let train_pool = Pool::new(vec![(&sub, full_idx, view_tag(&sub, Split::Train))]);
        let final_outcome = train_one(
            cfg,
            &env.frozen,
            &init,
            selected,
            &train_pool,
            None,
            seed,
            "final",
            &mut counts,
            &mut access,
        )?;
        if !has_grid {
            // Diagnostic only: the carve was part of the final training
            // data for methods that skipped selection.
            let val_pool = Pool::new(vec![(
                &sub,
                val_idx.clone(),
                view_tag(&sub, Split::Train),
            )]);
            selected_val = pool_accuracy(
                cfg.method,
                &final_outcome.model,
                &env.frozen,
                &val_pool,
                &mut counts,
                &mut access,
                "eval",
            )?;
        }
        let test_pool = Pool::new(vec![(
            &env.target,
            env.target.split_indices(Split::Test),
            view_tag(&env.target, Split::Test),
        )]);
        let test_acc = pool_accuracy(
            cfg.method,
            &final_outcome.model,
            &env.frozen,
            &test_pool,
            &mut counts,
            &mut access,
            "eval",
        )?;
        per_seed.push(SeedOutcome {
            seed,
            selected: selected.label(),
            val_accuracy: selected_val,
            test_accuracy: test_acc,
        });
        models.push(final_outcome.model);
    }

    let accs: Vec<f64> = per_seed.iter().map(|s| s.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let report = RunReport {
        protocol: cfg.protocol,
        method: cfg.method.display().to_string(),
        sampling_rate: cfg.sampling_rate,
        per_seed,
        mean_accuracy: mean,
        std_accuracy: std,
        per_domain: None,
        domain_average: None,
        op_counts: counts,
        access_log: access,
        config_echo: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, models))
}

pub fn run_transfer(cfg: &RunConfig, env: &RunEnv) -> Result<RunReport> {
    run_transfer_full(cfg, env).map(|(report, _)| report)
}

fn select_best(scored: &[(HyperParam, f64)]) -> (HyperParam, f64) {
    // Highest validation accuracy; ties break toward the smallest
    // hyperparameter value so reports are deterministic.
    let mut best = scored[0];
    for &(hp, acc) in &scored[1..] {
        let better = acc > best.1 + 1e-15
            || ((acc - best.1).abs() <= 1e-15 && hp.sort_key() < best.0.sort_key());
        if better {
            best = (hp, acc);
        }
    }
    (best.0, best.1)
}

/// Leave-one-domain-out: for every held-out domain, train on the pooled
/// remaining domains, select the hyperparameter on their pooled
/// validation splits, and evaluate on the held-out domain's test split.
pub fn run_dg(cfg: &RunConfig, env: &RunEnv) -> Result<RunReport> {
    cfg.validate()?;
    if env.dg.len() < 3 {
        return Err(Error::Contract(format!(
            "leave-one-domain-out needs >= 3 domains, got {}",
            env.dg.len()
        )));
    }
    let started = std::time::Instant::now();
    let classes = env.dg[0].num_classes();
    let candidates = candidate_grid(cfg);

    let mut per_domain = Vec::new();
    let mut counts = OpCounts::default();
    let mut access = AccessLog::default();

    for held_out in 0..env.dg.len() {
        let sources: Vec<&LabeledDataset> = env
            .dg
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .map(|(_, d)| d)
            .collect();
        let mut seed_outcomes = Vec::new();
        for &seed in &cfg.seeds {
            let mut head_rng = stream(seed, &format!("dg-head/{held_out}"));
            let init = env.frozen.replace_classifier(classes, &mut head_rng)?;

            let train_views: Vec<(&LabeledDataset, Vec<usize>, String)> = sources
                .iter()
                .map(|ds| (*ds, ds.split_indices(Split::Train), view_tag(ds, Split::Train)))
                .collect();
            let val_views: Vec<(&LabeledDataset, Vec<usize>, String)> = sources
                .iter()
                .map(|ds| (*ds, ds.split_indices(Split::Val), view_tag(ds, Split::Val)))
                .collect();

            // Train one model per candidate; keep the one with the best
            // pooled source-validation accuracy (no retraining phase).
            let mut best: Option<(HyperParam, f64, ViTModel)> = None;
            for &hp in &candidates {
                let train_pool = Pool::new(train_views.clone());
                let val_pool = Pool::new(val_views.clone());
                let outcome = train_one(
                    cfg,
                    &env.frozen,
                    &init,
                    hp,
                    &train_pool,
                    Some(&val_pool),
                    seed,
                    &format!("dg/{held_out}"),
                    &mut counts,
                    &mut access,
                )?;
                let replace = match &best {
                    None => true,
                    Some((bhp, bacc, _)) => {
                        outcome.best_val > bacc + 1e-15
                            || ((outcome.best_val - bacc).abs() <= 1e-15
                                && hp.sort_key() < bhp.sort_key())
                    }
                };
                if replace {
                    best = Some((hp, outcome.best_val, outcome.model));
                }
            }
            let (hp, val_acc, model) = best.expect("at least one candidate");
            let test_pool = Pool::new(vec![(
                &env.dg[held_out],
                env.dg[held_out].split_indices(Split::Test),
                view_tag(&env.dg[held_out], Split::Test),
            )]);
            let test_acc = pool_accuracy(
                cfg.method,
                &model,
                &env.frozen,
                &test_pool,
                &mut counts,
                &mut access,
                "eval",
            )?;
            seed_outcomes.push(SeedOutcome {
                seed,
                selected: hp.label(),
                val_accuracy: val_acc,
                test_accuracy: test_acc,
            });
        }
        let accs: Vec<f64> = seed_outcomes.iter().map(|s| s.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        per_domain.push(DomainOutcome {
            domain_id: env.dg[held_out].domain_id.clone(),
            per_seed: seed_outcomes,
            mean_accuracy: mean,
            std_accuracy: std,
        });
    }

    let domain_means: Vec<f64> = per_domain.iter().map(|d| d.mean_accuracy).collect();
    let (avg, _) = mean_std(&domain_means);
    let all_seed: Vec<SeedOutcome> =
        per_domain.iter().flat_map(|d| d.per_seed.clone()).collect();
    let accs: Vec<f64> = all_seed.iter().map(|s| s.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(RunReport {
        protocol: Protocol::Dg,
        method: cfg.method.display().to_string(),
        sampling_rate: cfg.sampling_rate,
        per_seed: all_seed,
        mean_accuracy: mean,
        std_accuracy: std,
        per_domain: Some(per_domain),
        domain_average: Some(avg),
        op_counts: counts,
        access_log: access,
        config_echo: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Cross-attention probability sweep: one transfer run per grid value
/// and rate, plus the p = 0 row (labeled as plain fine-tuning). The
/// validation-selected p is marked per rate.
pub fn sweep_p(cfg: &RunConfig, env: &RunEnv, grid: &[f64], rates: &[f64]) -> Result<SweepReport> {
    if cfg.method != BaselineKind::Stochca {
        return Err(Error::contract("the probability sweep applies to the gated method"));
    }
    let mut rows: Vec<(String, Option<f64>, Vec<CellStats>)> = Vec::new();

    // p = 0 reduces to vanilla fine-tuning.
    let mut ft_cells = Vec::new();
    for &rate in rates {
        let mut ft_cfg = cfg.clone();
        ft_cfg.method = BaselineKind::Ft;
        ft_cfg.sampling_rate = rate;
        let report = run_transfer(&ft_cfg, env)?;
        ft_cells.push(CellStats {
            rate,
            mean: report.mean_accuracy,
            std: report.std_accuracy,
            val_mean: mean_std(
                &report.per_seed.iter().map(|s| s.val_accuracy).collect::<Vec<_>>(),
            )
            .0,
        });
    }
    rows.push(("No (= FT)".to_string(), None, ft_cells));

    for &p in grid {
        let mut cells = Vec::new();
        for &rate in rates {
            let mut p_cfg = cfg.clone();
            p_cfg.p = Some(p);
            p_cfg.sampling_rate = rate;
            let report = run_transfer(&p_cfg, env)?;
            cells.push(CellStats {
                rate,
                mean: report.mean_accuracy,
                std: report.std_accuracy,
                val_mean: mean_std(
                    &report.per_seed.iter().map(|s| s.val_accuracy).collect::<Vec<_>>(),
                )
                .0,
            });
        }
        rows.push((format!("{p}"), Some(p), cells));
    }

    // Validation-selected p per rate, smallest p winning ties.
    let mut selected = Vec::new();
    for (col, &rate) in rates.iter().enumerate() {
        let mut best_p = grid[0];
        let mut best_val = f64::NEG_INFINITY;
        for (_, p, cells) in &rows {
            if let Some(p) = p {
                let val = cells[col].val_mean;
                if val > best_val + 1e-15 || ((val - best_val).abs() <= 1e-15 && *p < best_p) {
                    best_val = val;
                    best_p = *p;
                }
            }
        }
        selected.push((rate, best_p));
    }

    Ok(SweepReport {
        rates: rates.to_vec(),
        rows: rows
            .into_iter()
            .map(|(label, p, cells)| report::SweepRow { label, p, cells })
            .collect(),
        selected_p_per_rate: selected,
        config_echo: cfg.clone(),
    })
}

/// The full method-by-rate transfer grid.
pub fn run_tl_grid(
    cfg: &RunConfig,
    env: &RunEnv,
    methods: &[BaselineKind],
    rates: &[f64],
) -> Result<TlGridReport> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &method in methods {
        let mut cells = Vec::new();
        for &rate in rates {
            let mut m_cfg = cfg.clone();
            m_cfg.method = method;
            m_cfg.sampling_rate = rate;
            let report = run_transfer(&m_cfg, env)?;
            cells.push(CellStats {
                rate,
                mean: report.mean_accuracy,
                std: report.std_accuracy,
                val_mean: mean_std(
                    &report.per_seed.iter().map(|s| s.val_accuracy).collect::<Vec<_>>(),
                )
                .0,
            });
            reports.push(report);
        }
        rows.push((method.display().to_string(), cells));
    }
    Ok(TlGridReport {
        rates: rates.to_vec(),
        rows,
        reports,
    })
}

/// Empirical gate statistics for the probability grid: draws per value
/// and the binomial 3-sigma band check.
pub fn gate_statistics(p_values: &[f64], draws: usize, seed: u64) -> Result<Vec<(f64, f64, bool)>> {
    let mut out = Vec::new();
    for &p in p_values {
        let mut rng = stream(seed, &format!("gate-stats/{p}"));
        let mut on = 0u64;
        for _ in 0..draws {
            if draw_gates(p, 1, &mut rng)?[0] {
                on += 1;
            }
        }
        let rate = on as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let within = (rate - p).abs() <= 3.0 * sigma;
        out.push((p, rate, within));
    }
    Ok(out)
}
