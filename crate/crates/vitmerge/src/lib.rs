//! Merging fine-tuned vision transformers at desk scale.
//!
//! The crate trains tiny ViTs on synthetic single-channel tasks from a shared
//! pretrained base, then combines them with four merging families:
//!
//! * element-wise weight averaging ([`merge::avg_mean`]),
//! * task-vector arithmetic against the base ([`merge::task_arithmetic`]),
//! * gram-weighted closed-form merging per linear layer ([`merge::regmean`]),
//! * input-conditioned gated merging, where a small gating network produces
//!   per-input mixture weights and a weight-similarity scan decides which
//!   transformer blocks are mixed per input versus merged once
//!   ([`gate::build`], [`gate::MergedModel`]).
//!
//! Everything runs on a hand-rolled dense f64 kernel set ([`numkit`]); there
//! is no GPU path and no threading. All randomness flows through explicit
//! seeds, so every train/merge/eval pipeline is bit-reproducible.

mod error;

pub mod gate;
pub mod merge;
pub mod numkit;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use gate::{MergePlan, MergedModel, SimilarityReport, SimilarityStrategy, StaticMethod};
pub use merge::{GramStats, MergeMethod, MergeRecipe, TaskModel};
pub use numkit::Tensor;
pub use train::{Dataset, Family, GateNet, Split, SyntheticTaskSpec, TrainConfig};
pub use vit::{Group, ViTConfig, ViTParams};
