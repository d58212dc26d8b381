//! Toolkit for building sparse low-dimensional decision (SLDD) layers on top
//! of precomputed feature maps: diversity-aware training, gated group feature
//! selection, elastic-net regularization paths fitted with a variance-reduced
//! incremental solver, masked finetuning, and interpretability metrics
//! (loc_k, attribute alignment, masking-based localization maps).
//!
//! Each major capability has a runnable demo under `examples/`; the `sldd`
//! binary exposes the same operations as subcommands for file-based
//! pipelines.

pub mod alignment;
pub mod diversity;
pub mod error;
pub mod finetune;
pub mod io;
pub mod localization;
pub mod pipeline;
pub mod prox;
pub mod report;
pub mod saga;
pub mod select;
pub mod synth;
pub mod tensor;

pub use error::{Result, SlddError};
pub use tensor::{
    pool_maps, standardize, FeatureMapBatch, FeatureMatrix, LabelVector, Logits, ModelMeta,
    NormStats, SparseLinearModel, SparsityMetrics,
};
