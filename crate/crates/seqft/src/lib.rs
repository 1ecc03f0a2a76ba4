//! Sequential fine-tuning lab.
//!
//! A pretrained model is adapted across an ordered sequence of segmentation
//! tasks. Forgetting is held back by two mechanisms: a replay buffer filled
//! with the downstream samples that score the lowest self-supervised
//! reconstruction loss under the original model, and a retention stage that
//! distills each task's fine-tuned encoder into rank-constrained adapters
//! which are merged back into the previous encoder (`W' = W + BA`).
//!
//! The crate ships its own dense tensor engine with reverse-mode autodiff,
//! a patch-token MLP model family, the three training losses, segmentation
//! metrics (Dice, HD95), synthetic task generation with controlled
//! distribution shift, the sequential pipeline with ablation strategies, and
//! a CLI for reproducible experiments.
//!
//! Core math is generic over the scalar type ([`Scalar`]); the pipeline and
//! all file formats run on `f32` via the aliases at the crate root.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Default scalar used by the pipeline and all persisted formats.
pub type Elem = f32;

pub type Tensor = tensor::Tensor<Elem>;
pub type Binder = tensor::Binder<Elem>;
pub type ModelState = nn::ModelState<Elem>;
pub type FeatureMap = nn::FeatureMap<Elem>;
pub type LoraAdapter = lora::LoraAdapter<Elem>;
pub type AdaptedEncoder = lora::AdaptedEncoder<Elem>;
pub type AdamW = optim::AdamW<Elem>;
