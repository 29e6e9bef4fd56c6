//! Bidirectional scale decoupling: per-scale spatial attention, binary
//! salience suppression, the two stepwise decoupling passes (small→large
//! and large→small), and fusion of all six decoupled maps into a single
//! image embedding.
//!
//! The suppression masks are binary and act as constants in the backward
//! pass (stop-gradient); the attention path stays fully differentiable.

use crate::autodiff::{PadMode, Tape, Var};
use crate::encoders::ScaleFeatureSet;
use crate::nn::{BoundParams, Conv2d, Linear, Params};
use crate::{Error, Result};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

/// Default fraction of positions suppressed per step.
pub const DEFAULT_SUPPRESS_RATIO: f64 = 0.25;

/// Which end of the scale pyramid a decoupling pass starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SmallToLarge,
    LargeToSmall,
}

/// Spatial-attention unit: channel-wise average and max pooling, their
/// 2-channel concatenation through a 7×7 single-output convolution, then
/// sigmoid. Replicate padding keeps the map constant for constant input.
#[derive(Clone, Debug)]
pub struct SalienceExtractor {
    conv: Conv2d,
}

impl SalienceExtractor {
    pub fn new(name: impl Into<String>) -> Self {
        SalienceExtractor {
            conv: Conv2d::same(name, 2, 1, 7).with_pad_mode(PadMode::Replicate),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.conv.init(params, rng);
    }

    /// Attention map over a `(d, h, w)` feature: shape `(1, h, w)`,
    /// entries strictly inside (0, 1).
    pub fn forward(&self, tape: &Tape, bp: &BoundParams<'_>, feature: Var) -> Var {
        let avg = tape.channel_mean(feature);
        let max = tape.channel_max(feature);
        let stacked = tape.concat_channels(&[avg, max]);
        tape.sigmoid(self.conv.forward(tape, bp, stacked))
    }
}

/// Binary suppression mask: zeros at the `round(ratio · n)` largest
/// attention values, ones elsewhere. Ties are broken row-major (earlier
/// positions are suppressed first), making the mask deterministic.
pub fn suppression_mask(attention: &ArrayD<f64>, ratio: f64) -> Result<ArrayD<f64>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::SuppressionRatio { got: ratio });
    }
    let n = attention.len();
    assert!(n > 0, "suppression_mask: empty attention map");
    let k = (ratio * n as f64).round() as usize;

    let flat: Vec<f64> = attention.iter().copied().collect();
    assert!(
        flat.iter().all(|v| v.is_finite()),
        "suppression_mask: non-finite attention"
    );
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by value descending keeps row-major order among ties.
    order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap());

    let mut mask = ArrayD::ones(attention.raw_dim());
    {
        let slice = mask.as_slice_mut().expect("mask is standard layout");
        for &idx in order.iter().take(k) {
            slice[idx] = 0.0;
        }
    }
    Ok(mask)
}

/// Output of one directional pass, stored by scale index ascending
/// (`[0]` = smallest dilation rate) regardless of processing order.
#[derive(Clone, Debug)]
pub struct DirectionalOutput {
    /// Decoupled maps, each `(d, h, w)`.
    pub decoupled: [Var; 3],
    /// Attention maps, each `(1, h, w)`.
    pub attention: [Var; 3],
    /// Binary suppression masks, each `(1, h, w)`; constants w.r.t. the
    /// tape (stop-gradient).
    pub masks: [ArrayD<f64>; 3],
}

/// Both directional passes over one scale set.
#[derive(Clone, Debug)]
pub struct DecoupledFeatureSet {
    pub small_to_large: DirectionalOutput,
    pub large_to_small: DirectionalOutput,
}

/// The two stepwise decoupling recurrences. Each direction owns its own
/// salience-extractor parameters so the two passes can specialize.
#[derive(Clone, Debug)]
pub struct ScaleDecoupler {
    s2l_sfe: SalienceExtractor,
    l2s_sfe: SalienceExtractor,
}

impl ScaleDecoupler {
    pub fn new(prefix: &str) -> Self {
        ScaleDecoupler {
            s2l_sfe: SalienceExtractor::new(format!("{prefix}.s2l.sfe")),
            l2s_sfe: SalienceExtractor::new(format!("{prefix}.l2s.sfe")),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.s2l_sfe.init(params, rng);
        self.l2s_sfe.init(params, rng);
    }

    /// One directional pass. The first scale in processing order is
    /// attended unsuppressed; every later scale is first multiplied by the
    /// previous step's mask, attended, gated, and given back its original
    /// (unsuppressed) feature as the residual.
    pub fn decouple(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        scales: &ScaleFeatureSet,
        direction: Direction,
        ratio: f64,
    ) -> Result<DirectionalOutput> {
        self.decouple_inner(tape, bp, scales, direction, ratio, None)
    }

    /// Directional pass with externally fixed masks, bypassing mask
    /// computation. Gradient tests use this to probe the differentiable
    /// path without rank-flip discontinuities. `masks` is indexed by scale
    /// ascending, matching [`DirectionalOutput::masks`].
    pub fn decouple_with_masks(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        scales: &ScaleFeatureSet,
        direction: Direction,
        masks: &[ArrayD<f64>; 3],
    ) -> Result<DirectionalOutput> {
        self.decouple_inner(tape, bp, scales, direction, DEFAULT_SUPPRESS_RATIO, Some(masks))
    }

    fn decouple_inner(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        scales: &ScaleFeatureSet,
        direction: Direction,
        ratio: f64,
        fixed_masks: Option<&[ArrayD<f64>; 3]>,
    ) -> Result<DirectionalOutput> {
        let (order, sfe): (&[usize; 3], _) = match direction {
            Direction::SmallToLarge => (&[0, 1, 2], &self.s2l_sfe),
            Direction::LargeToSmall => (&[2, 1, 0], &self.l2s_sfe),
        };

        let mut decoupled = [None; 3];
        let mut attention = [None; 3];
        let mut masks: [Option<ArrayD<f64>>; 3] = [const { None }; 3];
        let mut previous_mask: Option<ArrayD<f64>> = None;

        for &m in order {
            let feature = scales.maps[m];
            let (attended_input, residual) = match &previous_mask {
                // First step: attend the raw feature.
                None => (feature, feature),
                // Later steps: suppress with the previous mask first; the
                // residual stays the original feature.
                Some(mask) => (tape.mul_const_bc(feature, mask), feature),
            };
            let a = sfe.forward(tape, bp, attended_input);
            let z = tape.add(tape.mul_bc(attended_input, a), residual);
            let mask = match fixed_masks {
                Some(given) => given[m].clone(),
                None => suppression_mask(&tape.value(a), ratio)?,
            };
            decoupled[m] = Some(z);
            attention[m] = Some(a);
            masks[m] = Some(mask.clone());
            previous_mask = Some(mask);
        }

        Ok(DirectionalOutput {
            decoupled: decoupled.map(Option::unwrap),
            attention: attention.map(Option::unwrap),
            masks: masks.map(Option::unwrap),
        })
    }

    /// Run both directions and collect the six decoupled maps.
    pub fn decouple_both(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        scales: &ScaleFeatureSet,
        ratio: f64,
    ) -> Result<DecoupledFeatureSet> {
        Ok(DecoupledFeatureSet {
            small_to_large: self.decouple(tape, bp, scales, Direction::SmallToLarge, ratio)?,
            large_to_small: self.decouple(tape, bp, scales, Direction::LargeToSmall, ratio)?,
        })
    }
}

/// Image embedding produced by fusing the decoupled maps: a `(dim,)`
/// tape variable.
#[derive(Clone, Copy, Debug)]
pub struct ImageEmbedding {
    pub var: Var,
}

/// Fusion head: channel-concatenate the decoupled maps, average-pool the
/// spatial grid, and project `maps·d → dim` with a learned linear layer
/// (bias initialized to zero). The standard model fuses the six maps of a
/// bidirectional pass; reduced variants fuse three.
#[derive(Clone, Debug)]
pub struct ScaleFusion {
    proj: Linear,
    num_maps: usize,
}

impl ScaleFusion {
    /// Fusion over the six maps of a bidirectional decoupling pass.
    pub fn new(prefix: &str, channels: usize, dim: usize) -> Self {
        Self::with_map_count(prefix, channels, dim, 6)
    }

    /// Fusion over an explicit number of equally shaped maps.
    pub fn with_map_count(prefix: &str, channels: usize, dim: usize, num_maps: usize) -> Self {
        assert!(num_maps > 0, "fusion needs at least one map");
        ScaleFusion {
            proj: Linear::new(format!("{prefix}.proj"), num_maps * channels, dim),
            num_maps,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.proj.init(params, rng);
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        dec: &DecoupledFeatureSet,
    ) -> Result<ImageEmbedding> {
        let all: Vec<Var> = dec
            .small_to_large
            .decoupled
            .iter()
            .chain(dec.large_to_small.decoupled.iter())
            .copied()
            .collect();
        self.forward_maps(tape, bp, &all)
    }

    /// Fuse an arbitrary map list (must match the constructed count).
    pub fn forward_maps(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        maps: &[Var],
    ) -> Result<ImageEmbedding> {
        assert_eq!(maps.len(), self.num_maps, "fusion map count mismatch");
        let expected = tape.shape(maps[0]);
        for &map in &maps[1..] {
            let got = tape.shape(map);
            if got != expected {
                return Err(Error::ShapeMismatch {
                    context: "scale fusion",
                    expected,
                    got,
                });
            }
        }
        let stacked = tape.concat_channels(maps);
        let pooled = tape.spatial_mean(stacked);
        Ok(ImageEmbedding {
            var: self.proj.forward(tape, bp, pooled),
        })
    }
}
