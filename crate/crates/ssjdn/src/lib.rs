//! Scale-decoupled, semantically gated cross-modal retrieval.
//!
//! This crate implements a small, fully deterministic image-text retrieval
//! network built around two ideas:
//!
//! * **Bidirectional scale decoupling (BSD)** — a multi-branch dilated
//!   convolution pyramid produces feature maps at several receptive-field
//!   scales; a spatial-attention unit then walks the scales in both
//!   directions (small→large and large→small), suppressing regions already
//!   claimed by previously visited scales so each scale's map specializes.
//! * **Label-supervised semantic decoupling (LSD)** — independently trained
//!   image/text classifiers supply a semantic gate that is fused into each
//!   modality's embedding, and their predicted categories modulate a
//!   semantic triplet loss that pushes same-category negatives harder.
//!
//! Everything runs on `f64` through a hand-rolled reverse-mode tape
//! ([`autodiff`]), which keeps gradients exactly checkable against central
//! differences and makes training bit-for-bit reproducible on a fixed seed.
//!
//! Module map:
//!
//! * [`autodiff`] — reverse-mode tape over `ndarray` tensors.
//! * [`nn`] — parameter store, layer builders, Adam optimizer.
//! * [`gradcheck`] — finite-difference gradient checking helpers.
//! * [`data`] — synthetic shape/caption corpus, vocabulary, dataset IO.
//! * [`encoders`] — image backbone, dilated scale pyramid, text encoder.
//! * [`bsd`] — spatial attention, suppression masks, scale decoupling, fusion.
//! * [`lsd`] — frozen classifier towers and semantic feature fusion.
//! * [`matching`] — cosine similarity, category-aware triplet losses.
//! * [`retrieval`] — ranking, recall@K / mean-recall evaluation.
//! * [`harness`] — config, two-phase training, checkpoints, ablations.

pub mod autodiff;
pub mod bsd;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lsd;
pub mod matching;
pub mod nn;
pub mod retrieval;

pub use error::Error;

/// Convenient result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
