//! Training, evaluation, and experiment orchestration.
//!
//! The model trains in two phases. Phase 1 ([`train_classifiers`]) fits a
//! pair of category classifiers — one per modality — with cross-entropy.
//! Phase 2 ([`train_retrieval`]) freezes those classifiers and trains the
//! retrieval towers with the ranking loss, consuming the classifiers'
//! category features and predicted categories as fixed signals.
//!
//! Both phases checkpoint to JSON ([`Checkpoint`]); [`evaluate`] scores a
//! phase-2 checkpoint on a dataset, [`search`] answers free-text queries,
//! and [`run_ablation`] trains and compares model variants under shared
//! seeds. All entry points are deterministic for a fixed [`Config`]: data
//! order, initialization, and gradient accumulation are all derived from
//! the config seed, independent of thread count.

mod ablation;
mod checkpoint;
mod config;
mod eval;
mod model;
mod parallel;
mod train;

pub use ablation::{run_ablation, AblationTable, Variant, VariantResult};
pub use checkpoint::{Checkpoint, CheckpointKind, EpochMetrics};
pub use config::{
    is_validation_sample, AttentionKind, Config, DirectionChoice, FusionMethod,
};
pub use eval::{encode_query, evaluate, export_attention, load_image, search};
pub use model::MAX_CAPTION_LEN;
pub use parallel::max_threads;
pub use train::{train_classifiers, train_retrieval};
