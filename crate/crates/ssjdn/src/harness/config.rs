//! Run configuration: hyperparameters, component switches, and the
//! fingerprint that ties reports and checkpoints back to the exact
//! settings that produced them.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which directional decoupling passes the image path runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionChoice {
    /// Both passes; their six maps are fused together.
    #[serde(rename = "both")]
    Both,
    /// Small-receptive-field-first pass only.
    #[serde(rename = "s2l")]
    SmallToLarge,
    /// Large-receptive-field-first pass only.
    #[serde(rename = "l2s")]
    LargeToSmall,
}

/// How the image path treats the scale pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Full decoupling: attention plus cross-scale suppression.
    Bsd,
    /// Attention enhancement per scale, no suppression between scales.
    Ma,
    /// Raw pyramid maps, no attention at all.
    None,
}

/// How a classifier's category feature is combined with an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    /// Elementwise gate (the standard model).
    Multiply,
    /// Elementwise sum.
    Add,
    /// Concatenation, doubling the embedding dimension on both sides.
    Concat,
}

fn default_embedding_dim() -> usize {
    64
}
fn default_class_boost() -> f64 {
    1.2
}
fn default_margin() -> f64 {
    0.2
}
fn default_suppress_ratio() -> f64 {
    crate::bsd::DEFAULT_SUPPRESS_RATIO
}
fn default_learning_rate() -> f64 {
    0.0002
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    15
}
fn default_seed() -> u64 {
    0
}
fn default_true() -> bool {
    true
}
fn default_direction() -> DirectionChoice {
    DirectionChoice::Both
}
fn default_attention() -> AttentionKind {
    AttentionKind::Bsd
}
fn default_fusion() -> FusionMethod {
    FusionMethod::Multiply
}

/// Every knob of a training/evaluation run. Defaults are desk-scale
/// (small embedding, small batches, few epochs); [`Config::apply_full_scale`]
/// restores the full-scale settings.
///
/// The triplet losses sum over negatives; the training loop divides each
/// batch loss by the batch length before the optimizer step so the
/// learning rate is batch-size independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Width of the joint embedding space (and of the classifiers'
    /// category features).
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Loss multiplier for pairs whose predicted categories agree.
    #[serde(default = "default_class_boost")]
    pub class_boost: f64,
    /// Ranking margin of the triplet losses.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Fraction of spatial positions suppressed between scales.
    #[serde(default = "default_suppress_ratio")]
    pub suppress_ratio: f64,
    /// Adam learning rate, shared by both training phases.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Root seed; every random stream is derived from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Scale decoupling on the image path (must agree with `attention`).
    #[serde(default = "default_true")]
    pub use_bsd: bool,
    /// Fuse classifier category features into both embeddings.
    #[serde(default = "default_true")]
    pub use_lsd: bool,
    /// Category-boosted ranking loss; when off, the plain ranking loss
    /// (every pair weighted 1) is used instead.
    #[serde(default = "default_true")]
    pub use_stl: bool,
    /// Directional passes to run; only consulted when `attention = bsd`.
    #[serde(default = "default_direction")]
    pub direction: DirectionChoice,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    /// Category-feature fusion method; only consulted when `use_lsd` is on.
    #[serde(default = "default_fusion")]
    pub fusion: FusionMethod,
    /// The boost-sensitivity sweep deliberately probes boost values below
    /// the contract minimum of 1. Only the sweep runner sets this; it is
    /// never read from a config file.
    #[serde(skip)]
    pub(crate) permit_sub_unit_boost: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            embedding_dim: default_embedding_dim(),
            class_boost: default_class_boost(),
            margin: default_margin(),
            suppress_ratio: default_suppress_ratio(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: default_seed(),
            use_bsd: true,
            use_lsd: true,
            use_stl: true,
            direction: default_direction(),
            attention: default_attention(),
            fusion: default_fusion(),
            permit_sub_unit_boost: false,
        }
    }
}

impl Config {
    /// Parse a TOML config file. Every field is optional; omitted fields
    /// take their defaults, unknown fields are rejected.
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Config = toml::from_str(&text)?;
        Ok(config)
    }

    /// Switch to the full-scale settings (wide embedding, large batches,
    /// long schedule). Desk-scale defaults exist so the whole pipeline
    /// runs in CPU-minutes; this restores the reference regime.
    pub fn apply_full_scale(&mut self) {
        self.embedding_dim = 512;
        self.batch_size = 100;
        self.epochs = 70;
    }

    /// Check value ranges and flag consistency.
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "margin {} must be finite and non-negative",
                self.margin
            )));
        }
        if !(self.suppress_ratio > 0.0 && self.suppress_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "suppress_ratio {} must lie strictly between 0 and 1",
                self.suppress_ratio
            )));
        }
        if !self.class_boost.is_finite() || self.class_boost <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "class_boost {} must be finite and positive",
                self.class_boost
            )));
        }
        if self.class_boost < 1.0 && !self.permit_sub_unit_boost {
            return Err(Error::BoostBelowOne {
                got: self.class_boost,
            });
        }
        if self.use_bsd != (self.attention == AttentionKind::Bsd) {
            return Err(Error::InvalidConfig(format!(
                "use_bsd = {} conflicts with attention = {:?}; decoupling is \
                 exactly the `bsd` attention mode",
                self.use_bsd, self.attention
            )));
        }
        if self.use_stl && !self.use_lsd {
            return Err(Error::InvalidConfig(
                "use_stl requires use_lsd: the semantic loss weights come from \
                 the classifier towers that the gating path trains against"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Stable 16-hex-digit digest of every (serialized) field, stamped
    /// into checkpoints and reports.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// 64-bit FNV-1a. Used for the config fingerprint and the seed-stable
/// validation split; not a cryptographic hash.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Whether a sample belongs to the held-out validation split (about one
/// in ten, chosen by a stable hash of the sample id so the split never
/// depends on dataset order or the run seed).
pub fn is_validation_sample(id: &str) -> bool {
    fnv1a64(id.as_bytes()) % 10 == 0
}
