//! Stochastic cross-attention fine-tuning at desk scale.
//!
//! A frozen pretrained vision transformer serves per-layer keys and
//! values; a target model being fine-tuned stochastically attends to
//! them instead of to itself, layer by layer, during training. Inference
//! is plain self-attention and never touches the frozen model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors and a define-by-run reverse-mode tape
//! - [`attention`]: self- and cross-attention kernels, single- and multi-head
//! - [`vit`]: a configurable tiny vision transformer
//! - [`stochca`]: gate draws, frozen KV extraction, the gated training step
//! - [`baselines`]: vanilla fine-tuning, activation regularization, dual-path ensembling
//! - [`datagen`]: deterministic synthetic multi-domain shape datasets
//! - [`harness`]: transfer-learning and leave-one-domain-out protocols
//! - [`analysis`]: cosine-similarity reports, gradient checking, cost accounting
//! - [`checkpoint`]: manifest + little-endian blob containers

pub mod analysis;
pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod optim;
pub mod rng;
pub mod stochca;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, TapeMode, Tensor, VarId};
