//! The three encoders feeding the retrieval model: a strided convolutional
//! image backbone producing a global feature map, a multi-rate dilated
//! pyramid expanding that map into three scale-specific views, and a
//! recurrent text encoder producing caption embeddings.
//!
//! Feature maps live on the autodiff tape in channels-first `(d, h, w)`
//! layout; images enter as `(H, W, 3)` arrays in `[0, 1]`.

use crate::autodiff::{Tape, Var};
use crate::nn::{BoundParams, Conv2d, Embedding, Gru, Params};
use crate::{Error, Result};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

/// Dilation rates of the three pyramid branches, ascending; branch `m`
/// (1-based) uses `DILATION_RATES[m - 1]`.
pub const DILATION_RATES: [usize; 3] = [6, 12, 18];

/// Smallest spatial side a feature map may have and still pass through
/// the dilated pyramid.
pub const MIN_FEATURE_SIZE: usize = 4;

/// Global image feature map: a tape variable of shape `(d, h, w)`, plus
/// the input-image leaf it was computed from so gradient probes can reach
/// individual pixels.
#[derive(Clone, Copy, Debug)]
pub struct GlobalFeatureMap {
    pub var: Var,
    pub input: Var,
}

impl GlobalFeatureMap {
    /// Wrap a raw tape variable (used by tests and by consumers that
    /// synthesize maps directly); the input handle aliases the map itself.
    pub fn from_var(var: Var) -> Self {
        GlobalFeatureMap { var, input: var }
    }

    /// Channel count and spatial dims `(d, h, w)`.
    pub fn dims(&self, tape: &Tape) -> (usize, usize, usize) {
        let s = tape.shape(self.var);
        (s[0], s[1], s[2])
    }
}

/// The three scale-specific feature maps, ordered by dilation rate
/// ascending. All share the `(d, h, w)` shape of the global map.
#[derive(Clone, Copy, Debug)]
pub struct ScaleFeatureSet {
    pub maps: [Var; 3],
}

/// Fixed-dimension caption embedding (shape `(dim,)` on the tape).
#[derive(Clone, Copy, Debug)]
pub struct TextEmbedding {
    pub var: Var,
}

// ---------------------------------------------------------------------------
// Image backbone
// ---------------------------------------------------------------------------

/// Depth/width of the convolutional backbone. Every block is a 3×3
/// convolution (stride per block) followed by ReLU; the product of the
/// strides is the total downsampling factor.
#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 24, 32, 32],
            strides: vec![2, 2, 2, 1],
        }
    }
}

/// Strided convolutional image encoder: `(H, W, 3)` image in `[0,1]` →
/// `(d, H/stride, W/stride)` feature map.
#[derive(Clone, Debug)]
pub struct ImageBackbone {
    convs: Vec<Conv2d>,
    stride: usize,
    out_channels: usize,
}

impl ImageBackbone {
    pub fn new(prefix: &str, cfg: &BackboneConfig) -> Self {
        assert_eq!(
            cfg.channels.len(),
            cfg.strides.len(),
            "backbone channels and strides must pair up"
        );
        assert!(!cfg.channels.is_empty(), "backbone needs at least one block");
        let mut convs = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = 3;
        for (i, (&out_ch, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            convs.push(
                Conv2d::same(format!("{prefix}.block{i}"), in_ch, out_ch, 3)
                    .with_stride(stride),
            );
            in_ch = out_ch;
        }
        ImageBackbone {
            convs,
            stride: cfg.strides.iter().product(),
            out_channels: *cfg.channels.last().unwrap(),
        }
    }

    /// Total spatial downsampling factor.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Channel count `d` of the produced feature map.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for conv in &self.convs {
            conv.init(params, rng);
        }
    }

    /// Encode one image. The input must be finite with sides divisible by
    /// the backbone stride.
    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        image: &Array3<f64>,
    ) -> Result<GlobalFeatureMap> {
        let (h, w, ch) = image.dim();
        assert_eq!(ch, 3, "images must have exactly three channels");
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "input image".to_owned(),
            });
        }
        for side in [h, w] {
            if side % self.stride != 0 || side == 0 {
                return Err(Error::ImageStrideMismatch {
                    got: side,
                    stride: self.stride,
                });
            }
        }
        let chw = Array3::from_shape_fn((3, h, w), |(c, y, x)| image[(y, x, c)]);
        let input = tape.leaf(chw.into_dyn());
        let mut x = input;
        for conv in &self.convs {
            x = tape.relu(conv.forward(tape, bp, x));
        }
        Ok(GlobalFeatureMap { var: x, input })
    }
}

// ---------------------------------------------------------------------------
// Multi-rate dilated pyramid
// ---------------------------------------------------------------------------

/// Three parallel 3×3 dilated convolutions (rates 6, 12, 18) with same
/// padding and ReLU, turning the global map into three scale-specific
/// maps of identical shape.
#[derive(Clone, Debug)]
pub struct ScalePyramid {
    branches: Vec<Conv2d>,
}

impl ScalePyramid {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let branches = DILATION_RATES
            .iter()
            .map(|&rate| {
                Conv2d::same(format!("{prefix}.rate{rate}"), channels, channels, 3)
                    .with_dilation(rate)
            })
            .collect();
        ScalePyramid { branches }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for conv in &self.branches {
            conv.init(params, rng);
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        fg: &GlobalFeatureMap,
    ) -> Result<ScaleFeatureSet> {
        let (_, h, w) = fg.dims(tape);
        if h < MIN_FEATURE_SIZE || w < MIN_FEATURE_SIZE {
            return Err(Error::FeatureMapTooSmall {
                got_h: h,
                got_w: w,
                min: MIN_FEATURE_SIZE,
            });
        }
        let maps: Vec<Var> = self
            .branches
            .iter()
            .map(|conv| tape.relu(conv.forward(tape, bp, fg.var)))
            .collect();
        Ok(ScaleFeatureSet {
            maps: [maps[0], maps[1], maps[2]],
        })
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

/// Embedding-lookup + gated-recurrent caption encoder producing one
/// fixed-size vector per caption.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: Embedding,
    gru: Gru,
    dim: usize,
}

impl TextEncoder {
    pub fn new(prefix: &str, vocab_size: usize, dim: usize) -> Self {
        TextEncoder {
            embedding: Embedding::new(format!("{prefix}.embed"), vocab_size, dim),
            gru: Gru::new(format!("{prefix}.gru"), dim, dim),
            dim,
        }
    }

    /// Output dimension of the produced embeddings.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.embedding.init(params, rng);
        self.gru.init(params, rng);
    }

    /// Encode the first `length` positions of a padded index sequence.
    /// Positions past `length` never influence the output; a zero-length
    /// sequence yields the encoder's learned initial state.
    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        ids: &[usize],
        length: usize,
    ) -> TextEmbedding {
        assert!(length <= ids.len(), "length exceeds the token buffer");
        let inputs: Vec<Var> = ids[..length]
            .iter()
            .map(|&token| self.embedding.forward(tape, bp, token))
            .collect();
        TextEmbedding {
            var: self.gru.forward_sequence(tape, bp, &inputs),
        }
    }
}
