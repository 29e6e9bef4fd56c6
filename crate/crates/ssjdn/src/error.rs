//! Crate-wide error type.
//!
//! Tensor-shape violations inside the autodiff tape are programming errors
//! and panic via assertions; everything a caller can plausibly get wrong
//! (bad config values, malformed datasets, incompatible checkpoints,
//! degenerate numeric inputs) surfaces as an [`Error`].

use thiserror::Error;

/// All failure modes exposed by the public API.
#[derive(Debug, Error)]
pub enum Error {
    /// Requested more shape categories than the generator has templates for.
    #[error(
        "requested {requested} categories but only {} shape templates exist: {}",
        available.len(),
        available.join(", ")
    )]
    TooManyCategories {
        /// Number of categories asked for.
        requested: usize,
        /// Names of every available shape template.
        available: Vec<String>,
    },

    /// Synthetic images must be large enough to carry multi-scale content.
    #[error("image side {got} is too small; the generator requires at least {min} pixels")]
    ImageTooSmall { got: usize, min: usize },

    /// Vocabulary construction needs at least one caption.
    #[error("empty corpus")]
    EmptyCorpus,

    /// Two dataset samples shared an id.
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),

    /// A numeric input contained NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Two tensors that must agree in shape did not.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Image side must be divisible by the backbone's total stride.
    #[error("image side {got} is not a multiple of the backbone stride {stride}")]
    ImageStrideMismatch { got: usize, stride: usize },

    /// A dataset sample referenced a category id outside `0..num_categories`.
    #[error("sample {id:?} has category {got} outside 0..{num_categories}")]
    CategoryOutOfRange {
        id: String,
        got: usize,
        num_categories: usize,
    },

    /// A dataset sample did not carry the expected number of captions.
    #[error("sample {id:?} has {got} captions; expected {expected}")]
    CaptionCount { id: String, got: usize, expected: usize },

    /// An image file referenced by the annotations was missing or unreadable.
    #[error("cannot read image {path:?} for sample {id:?}: {source}")]
    MissingImage {
        id: String,
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Feature map too small for the dilated pyramid's largest receptive field.
    #[error("feature map {got_h}x{got_w} is below the pyramid minimum of {min}x{min}")]
    FeatureMapTooSmall { got_h: usize, got_w: usize, min: usize },

    /// Suppression ratio must lie strictly between zero and one.
    #[error("suppression ratio {got} is outside the open interval (0, 1)")]
    SuppressionRatio { got: f64 },

    /// Similarity of a zero-magnitude embedding is undefined.
    #[error("degenerate embedding: zero-magnitude vector at index {index} of the {side} set")]
    DegenerateEmbedding { side: &'static str, index: usize },

    /// The same-category boost must not deflate matched-pair similarity.
    #[error("category boost {got} is below 1; boosting must not weaken matched pairs")]
    BoostBelowOne { got: f64 },

    /// A class label fell outside the classifier's output range.
    #[error("label {got} is outside the {num_classes}-way classifier range")]
    LabelOutOfRange { got: usize, num_classes: usize },

    /// Ranking K must be positive and there must be something to rank.
    #[error("cannot compute recall: {reason}")]
    InvalidRanking { reason: String },

    /// The image↔caption correspondence was malformed.
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),

    /// A configuration value failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Retrieval training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite {term}")]
    Diverged {
        epoch: usize,
        batch: usize,
        term: String,
    },

    /// A checkpoint was used for the wrong phase or with the wrong dataset.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// A caption produced no known tokens, so no query embedding exists.
    #[error("query {0:?} contains no tokens known to the vocabulary")]
    EmptyQuery(String),

    /// Underlying filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON (annotations, checkpoints, reports).
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed TOML config file.
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
