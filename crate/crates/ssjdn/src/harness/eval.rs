//! Checkpoint-driven evaluation, single-query search, and attention-map
//! export. Embedding a split parallelizes per sample (bounded by
//! [`super::parallel::max_threads`]); results are order-fixed, so reports
//! are identical for any worker count.

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::FusionMethod;
use super::model::{
    fuse_with_method, ClassifierPair, RetrievalModel, SemanticCache, MAX_CAPTION_LEN,
};
use super::parallel::parallel_map;
use crate::autodiff::Tape;
use crate::data::{tokenize, Dataset, Vocabulary, CAPTIONS_PER_IMAGE};
use crate::nn::Params;
use crate::retrieval::{
    rank_query, recall_at_k, similarity_matrix, GroundTruth, QueryDirection, RetrievalReport,
};
use crate::{Error, Result};
use ndarray::{Array2, Array3, ArrayD};
use std::path::{Path, PathBuf};

/// Embed every sample of `indices`: one row per image and five rows per
/// image's captions (image-major). `fusion` carries the frozen category
/// features when the config fuses them.
pub(crate) fn embed_split(
    model: &RetrievalModel,
    params: &Params,
    dataset: &Dataset,
    indices: &[usize],
    vocab: &Vocabulary,
    fusion: Option<(&SemanticCache, FusionMethod)>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    type Embedded = (Vec<f64>, Vec<Vec<f64>>);
    let jobs: Vec<usize> = indices.to_vec();
    let rows: Vec<Result<Embedded>> = parallel_map(&jobs, |&i| {
        let sample = &dataset.samples[i];
        let tape = Tape::inference();
        let bp = params.bind(&tape);
        let mut image = model.image_forward(&tape, &bp, &sample.image)?;
        if let Some((cache, method)) = fusion {
            image = fuse_with_method(&tape, image, &cache.image_feature[i], method);
        }
        let image_row = tape.with_value(image, |v| v.iter().copied().collect());
        let mut caption_rows = Vec::with_capacity(CAPTIONS_PER_IMAGE);
        for (k, caption) in sample.captions.iter().enumerate() {
            let (ids, length) = vocab.encode_caption(caption, MAX_CAPTION_LEN);
            let mut text = model.text_forward(&tape, &bp, &ids, length);
            if let Some((cache, method)) = fusion {
                let slot = i * CAPTIONS_PER_IMAGE + k;
                text = fuse_with_method(&tape, text, &cache.caption_feature[slot], method);
            }
            caption_rows.push(tape.with_value(text, |v| v.iter().copied().collect()));
        }
        Ok((image_row, caption_rows))
    });

    let mut image_rows = Vec::with_capacity(indices.len());
    let mut caption_rows = Vec::with_capacity(indices.len() * CAPTIONS_PER_IMAGE);
    for row in rows {
        let (image, captions) = row?;
        image_rows.push(image);
        caption_rows.extend(captions);
    }
    Ok((to_matrix(image_rows), to_matrix(caption_rows)))
}

fn to_matrix(rows: Vec<Vec<f64>>) -> Array2<f64> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((height, width), flat).expect("rows have equal width")
}

/// Six standard recalls plus their mean over an embedded split, assuming
/// the contiguous five-captions-per-image layout.
pub(crate) fn report_from_embeddings(
    images: &Array2<f64>,
    texts: &Array2<f64>,
    config_fingerprint: String,
) -> Result<RetrievalReport> {
    let similarity = similarity_matrix(images, texts)?;
    let gt = GroundTruth::contiguous(images.nrows());
    let mut i2t = [0.0; 3];
    let mut t2i = [0.0; 3];
    for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
        i2t[slot] = recall_at_k(&similarity, &gt, k, QueryDirection::ImageToText)?;
        t2i[slot] = recall_at_k(&similarity, &gt, k, QueryDirection::TextToImage)?;
    }
    Ok(RetrievalReport::from_recalls(i2t, t2i, config_fingerprint))
}

/// Embed every image and caption of `dataset` with a trained retrieval
/// checkpoint and compute the full recall report.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<RetrievalReport> {
    evaluate_cached(checkpoint, dataset, None)
}

/// [`evaluate`] with an optional precomputed classifier cache.
pub(crate) fn evaluate_cached(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    shared_cache: Option<&SemanticCache>,
) -> Result<RetrievalReport> {
    checkpoint.require_kind(CheckpointKind::Retrieval)?;
    dataset.validate()?;
    let config = &checkpoint.config;
    let vocab = &checkpoint.vocabulary;
    let params = checkpoint.to_params();
    let model = RetrievalModel::new(config, vocab.size());

    let owned_cache = if config.use_lsd && shared_cache.is_none() {
        let pair = ClassifierPair::new(vocab.size(), config.embedding_dim, checkpoint.num_categories);
        Some(SemanticCache::build(&pair, &params, dataset, vocab)?)
    } else {
        None
    };
    let cache = shared_cache.or(owned_cache.as_ref());
    let fusion = config.use_lsd.then(|| {
        (
            cache.expect("semantic cache built when category fusion is on"),
            config.fusion,
        )
    });

    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (images, texts) = embed_split(&model, &params, dataset, &indices, vocab, fusion)?;
    report_from_embeddings(&images, &texts, checkpoint.config_fingerprint.clone())
}

/// Embed a free-text query with a retrieval checkpoint's text tower.
pub fn encode_query(checkpoint: &Checkpoint, query: &str) -> Result<Vec<f64>> {
    checkpoint.require_kind(CheckpointKind::Retrieval)?;
    let config = &checkpoint.config;
    let vocab = &checkpoint.vocabulary;
    let known = tokenize(query)
        .iter()
        .any(|token| vocab.token_index(token).is_some());
    if !known {
        return Err(Error::EmptyQuery(query.to_owned()));
    }
    let params = checkpoint.to_params();
    let model = RetrievalModel::new(config, vocab.size());
    let (ids, length) = vocab.encode_caption(query, MAX_CAPTION_LEN);

    let tape = Tape::inference();
    let bp = params.bind(&tape);
    let mut text = model.text_forward(&tape, &bp, &ids, length);
    if config.use_lsd {
        let pair = ClassifierPair::new(vocab.size(), config.embedding_dim, checkpoint.num_categories);
        let prediction = pair.text.forward(&tape, &bp, &ids, length);
        let feature = tape.value(prediction.feature);
        text = fuse_with_method(&tape, text, &feature, config.fusion);
    }
    Ok(tape.with_value(text, |v| v.iter().copied().collect()))
}

/// Rank a dataset's images against a text query, best match first.
/// Returns `(sample id, similarity score)` pairs.
pub fn search(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    query: &str,
    top_k: usize,
) -> Result<Vec<(String, f64)>> {
    checkpoint.require_kind(CheckpointKind::Retrieval)?;
    dataset.validate()?;
    let config = &checkpoint.config;
    let vocab = &checkpoint.vocabulary;
    let params = checkpoint.to_params();
    let model = RetrievalModel::new(config, vocab.size());

    let owned_cache = if config.use_lsd {
        let pair = ClassifierPair::new(vocab.size(), config.embedding_dim, checkpoint.num_categories);
        Some(SemanticCache::build(&pair, &params, dataset, vocab)?)
    } else {
        None
    };
    let fusion = owned_cache.as_ref().map(|cache| (cache, config.fusion));

    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (images, _) = embed_split(&model, &params, dataset, &indices, vocab, fusion)?;
    let query_row = encode_query(checkpoint, query)?;
    let ranked = rank_query(&query_row, &images, top_k)?;
    Ok(ranked
        .into_iter()
        .map(|(i, score)| (dataset.samples[i].id.clone(), score))
        .collect())
}

/// Load an image file into the `(height, width, 3)` unit-interval layout
/// the encoders expect.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let rgb = image::open(path)?.to_rgb8();
    let (width, height) = rgb.dimensions();
    let mut out = Array3::zeros((height as usize, width as usize, 3));
    for y in 0..height as usize {
        for x in 0..width as usize {
            let pixel = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[(y, x, c)] = f64::from(pixel.0[c]) / 255.0;
            }
        }
    }
    Ok(out)
}

/// Render every attention map the model computes for one image as a
/// grayscale PNG under `out_dir` and return the written paths.
pub fn export_attention(
    checkpoint: &Checkpoint,
    image: &Array3<f64>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    checkpoint.require_kind(CheckpointKind::Retrieval)?;
    let config = &checkpoint.config;
    let params = checkpoint.to_params();
    let model = RetrievalModel::new(config, checkpoint.vocabulary.size());

    let tape = Tape::inference();
    let bp = params.bind(&tape);
    let maps = model.attention_maps(&tape, &bp, image)?;
    if maps.is_empty() {
        return Err(Error::InvalidConfig(
            "this checkpoint's wiring computes no attention maps".to_owned(),
        ));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(maps.len());
    for (label, map) in maps {
        let path = out_dir.join(format!("{label}.png"));
        save_grayscale(&map, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Write a `(1, h, w)` map with values in `[0, 1]` as an 8-bit grayscale
/// PNG.
fn save_grayscale(map: &ArrayD<f64>, path: &Path) -> Result<()> {
    let shape = map.shape();
    assert_eq!(shape.len(), 3, "attention maps are single-channel grids");
    assert_eq!(shape[0], 1, "attention maps are single-channel grids");
    let (h, w) = (shape[1], shape[2]);
    let mut png = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let value = map[[0, y, x]].clamp(0.0, 1.0);
            png.put_pixel(x as u32, y as u32, image::Luma([(value * 255.0).round() as u8]));
        }
    }
    png.save(path)?;
    Ok(())
}

