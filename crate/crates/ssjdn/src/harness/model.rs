//! Model assembly: the two classifier towers, the retrieval network in
//! all its configuration variants, and the frozen-classifier cache used
//! during retrieval training.

use super::config::{AttentionKind, Config, DirectionChoice, FusionMethod};
use super::parallel::parallel_map;
use crate::autodiff::{Tape, Var};
use crate::bsd::{Direction, SalienceExtractor, ScaleDecoupler, ScaleFusion};
use crate::data::{Dataset, Sample, Vocabulary, CAPTIONS_PER_IMAGE};
use crate::encoders::{BackboneConfig, ImageBackbone, ScalePyramid, TextEncoder};
use crate::lsd::{ImageClassifier, TextClassifier};
use crate::nn::{BoundParams, Params};
use crate::Result;
use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha8Rng;

/// Captions are padded or truncated to this many tokens everywhere.
pub const MAX_CAPTION_LEN: usize = 16;

/// The two independently trained category classifiers.
pub(crate) struct ClassifierPair {
    pub image: ImageClassifier,
    pub text: TextClassifier,
}

impl ClassifierPair {
    pub fn new(vocab_size: usize, dim: usize, num_classes: usize) -> Self {
        ClassifierPair {
            image: ImageClassifier::new("cls.image", &BackboneConfig::default(), dim, num_classes),
            text: TextClassifier::new("cls.text", vocab_size, dim, num_classes),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.image.init(params, rng);
        self.text.init(params, rng);
    }
}

/// The retrieval network, wired according to the config's component
/// switches. Classifier towers are separate (see [`ClassifierPair`]);
/// their frozen outputs enter through [`SemanticCache`].
pub(crate) struct RetrievalModel {
    backbone: ImageBackbone,
    pyramid: ScalePyramid,
    decoupler: Option<ScaleDecoupler>,
    attend_sfe: Option<SalienceExtractor>,
    fusion: ScaleFusion,
    text: TextEncoder,
    attention: AttentionKind,
    direction: DirectionChoice,
    suppress_ratio: f64,
}

/// Maps entering fusion: six for a bidirectional decoupling pass, three
/// for every reduced image path.
fn fused_map_count(attention: AttentionKind, direction: DirectionChoice) -> usize {
    match (attention, direction) {
        (AttentionKind::Bsd, DirectionChoice::Both) => 6,
        _ => 3,
    }
}

impl RetrievalModel {
    pub fn new(config: &Config, vocab_size: usize) -> Self {
        let backbone = ImageBackbone::new("ret.image.backbone", &BackboneConfig::default());
        let channels = backbone.out_channels();
        let decoupler = (config.attention == AttentionKind::Bsd)
            .then(|| ScaleDecoupler::new("ret.image.decouple"));
        let attend_sfe = (config.attention == AttentionKind::Ma)
            .then(|| SalienceExtractor::new("ret.image.attend.sfe"));
        let maps = fused_map_count(config.attention, config.direction);
        RetrievalModel {
            backbone,
            pyramid: ScalePyramid::new("ret.image.pyramid", channels),
            decoupler,
            attend_sfe,
            fusion: ScaleFusion::with_map_count("ret.image.fuse", channels, config.embedding_dim, maps),
            text: TextEncoder::new("ret.text", vocab_size, config.embedding_dim),
            attention: config.attention,
            direction: config.direction,
            suppress_ratio: config.suppress_ratio,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.backbone.init(params, rng);
        self.pyramid.init(params, rng);
        if let Some(decoupler) = &self.decoupler {
            decoupler.init(params, rng);
        }
        if let Some(sfe) = &self.attend_sfe {
            sfe.init(params, rng);
        }
        self.fusion.init(params, rng);
        self.text.init(params, rng);
    }

    /// Image half, up to (but not including) category-feature fusion.
    pub fn image_forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        image: &Array3<f64>,
    ) -> Result<Var> {
        let global = self.backbone.forward(tape, bp, image)?;
        let scales = self.pyramid.forward(tape, bp, &global)?;
        let maps: Vec<Var> = match self.attention {
            AttentionKind::Bsd => {
                let decoupler = self.decoupler.as_ref().expect("bsd wiring has a decoupler");
                match self.direction {
                    DirectionChoice::Both => {
                        let dec = decoupler.decouple_both(tape, bp, &scales, self.suppress_ratio)?;
                        return Ok(self.fusion.forward(tape, bp, &dec)?.var);
                    }
                    DirectionChoice::SmallToLarge => {
                        decoupler
                            .decouple(tape, bp, &scales, Direction::SmallToLarge, self.suppress_ratio)?
                            .decoupled
                            .to_vec()
                    }
                    DirectionChoice::LargeToSmall => {
                        decoupler
                            .decouple(tape, bp, &scales, Direction::LargeToSmall, self.suppress_ratio)?
                            .decoupled
                            .to_vec()
                    }
                }
            }
            AttentionKind::Ma => {
                let sfe = self.attend_sfe.as_ref().expect("ma wiring has an extractor");
                scales
                    .maps
                    .iter()
                    .map(|&feature| {
                        let attention = sfe.forward(tape, bp, feature);
                        tape.add(tape.mul_bc(feature, attention), feature)
                    })
                    .collect()
            }
            AttentionKind::None => scales.maps.to_vec(),
        };
        Ok(self.fusion.forward_maps(tape, bp, &maps)?.var)
    }

    /// Text half, up to (but not including) category-feature fusion.
    pub fn text_forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        ids: &[usize],
        length: usize,
    ) -> Var {
        self.text.forward(tape, bp, ids, length).var
    }

    /// Attention maps for visualization, labeled `{pass}_rate{r}` in scale
    /// order. Empty for wirings that compute no attention.
    pub fn attention_maps(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        image: &Array3<f64>,
    ) -> Result<Vec<(String, ArrayD<f64>)>> {
        let global = self.backbone.forward(tape, bp, image)?;
        let scales = self.pyramid.forward(tape, bp, &global)?;
        let mut out = Vec::new();
        match self.attention {
            AttentionKind::Bsd => {
                let decoupler = self.decoupler.as_ref().expect("bsd wiring has a decoupler");
                let passes: &[Direction] = match self.direction {
                    DirectionChoice::Both => &[Direction::SmallToLarge, Direction::LargeToSmall],
                    DirectionChoice::SmallToLarge => &[Direction::SmallToLarge],
                    DirectionChoice::LargeToSmall => &[Direction::LargeToSmall],
                };
                for &pass in passes {
                    let label = match pass {
                        Direction::SmallToLarge => "s2l",
                        Direction::LargeToSmall => "l2s",
                    };
                    let output = decoupler.decouple(tape, bp, &scales, pass, self.suppress_ratio)?;
                    for (i, &rate) in crate::encoders::DILATION_RATES.iter().enumerate() {
                        out.push((format!("{label}_rate{rate}"), tape.value(output.attention[i])));
                    }
                }
            }
            AttentionKind::Ma => {
                let sfe = self.attend_sfe.as_ref().expect("ma wiring has an extractor");
                for (&feature, &rate) in scales.maps.iter().zip(&crate::encoders::DILATION_RATES) {
                    let attention = sfe.forward(tape, bp, feature);
                    out.push((format!("ma_rate{rate}"), tape.value(attention)));
                }
            }
            AttentionKind::None => {}
        }
        Ok(out)
    }
}

/// Combine an embedding with a frozen category feature. The feature
/// enters as a constant: everything upstream of it is frozen, so no
/// gradient is lost.
pub(crate) fn fuse_with_method(
    tape: &Tape,
    embedding: Var,
    semantic: &ArrayD<f64>,
    method: FusionMethod,
) -> Var {
    match method {
        FusionMethod::Multiply => tape.mul_const(embedding, semantic),
        FusionMethod::Add => tape.add_const(embedding, semantic),
        FusionMethod::Concat => {
            let tail = tape.leaf(semantic.clone());
            tape.concat_vec(&[embedding, tail])
        }
    }
}

/// Frozen classifier outputs for one dataset: per-image and per-caption
/// category features and predicted categories. Computed once per
/// (classifier parameters, dataset) pair; retrieval training and
/// evaluation then reuse it without touching the classifier towers.
pub(crate) struct SemanticCache {
    pub image_feature: Vec<ArrayD<f64>>,
    pub image_category: Vec<usize>,
    /// Caption-major: image `i`'s `k`-th caption sits at `5i + k`.
    pub caption_feature: Vec<ArrayD<f64>>,
    pub caption_category: Vec<usize>,
}

impl SemanticCache {
    pub fn build(
        pair: &ClassifierPair,
        params: &Params,
        dataset: &Dataset,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        type PerSample = (ArrayD<f64>, usize, Vec<(ArrayD<f64>, usize)>);
        let per_sample: Vec<Result<PerSample>> =
            parallel_map(&dataset.samples, |sample: &Sample| {
                let tape = Tape::inference();
                let bp = params.bind(&tape);
                let image = pair.image.forward(&tape, &bp, &sample.image)?;
                let image_feature = tape.value(image.feature);
                let mut captions = Vec::with_capacity(CAPTIONS_PER_IMAGE);
                for caption in &sample.captions {
                    let (ids, length) = vocab.encode_caption(caption, MAX_CAPTION_LEN);
                    let text = pair.text.forward(&tape, &bp, &ids, length);
                    captions.push((tape.value(text.feature), text.predicted));
                }
                Ok((image_feature, image.predicted, captions))
            });

        let mut cache = SemanticCache {
            image_feature: Vec::with_capacity(dataset.len()),
            image_category: Vec::with_capacity(dataset.len()),
            caption_feature: Vec::with_capacity(dataset.len() * CAPTIONS_PER_IMAGE),
            caption_category: Vec::with_capacity(dataset.len() * CAPTIONS_PER_IMAGE),
        };
        for result in per_sample {
            let (image_feature, image_category, captions) = result?;
            cache.image_feature.push(image_feature);
            cache.image_category.push(image_category);
            for (feature, category) in captions {
                cache.caption_feature.push(feature);
                cache.caption_category.push(category);
            }
        }
        Ok(cache)
    }
}
