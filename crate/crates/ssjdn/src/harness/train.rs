//! The two training phases.
//!
//! Phase 1 trains the image and text category classifiers on the training
//! split. Phase 2 freezes them and trains the retrieval network with the
//! ranking loss; the frozen towers contribute category features (fused
//! into the embeddings) and predicted categories (weighting the loss).
//!
//! Gradients flow through per-sample tapes: each batch builds one small
//! batch-level tape holding only the embeddings, similarity matrix, and
//! loss; its backward sweep yields one gradient per embedding, and each
//! sample's own tape is then swept with that gradient as its seed. The
//! accumulation order is fixed, so training is bit-for-bit reproducible.

use super::checkpoint::{Checkpoint, CheckpointKind, EpochMetrics};
use super::config::{is_validation_sample, Config};
use super::eval::{embed_split, report_from_embeddings};
use super::model::{
    fuse_with_method, ClassifierPair, RetrievalModel, SemanticCache, MAX_CAPTION_LEN,
};
use super::parallel::parallel_map;
use crate::autodiff::{Tape, Var};
use crate::data::{build_vocabulary, derive_seed, Dataset, Sample, Vocabulary, CAPTIONS_PER_IMAGE};
use crate::lsd::classification_loss;
use crate::matching::{cosine_matrix, semantic_triplet_loss_op, BetaMatrix};
use crate::nn::{Adam, BoundParams, GradAccum, Params};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

// Sub-seed streams. Classifier and retrieval training draw from disjoint
// streams so the phases stay independently reproducible.
const STREAM_CLASSIFIER_INIT: u64 = 11;
const STREAM_RETRIEVAL_INIT: u64 = 21;
const STREAM_CLASSIFIER_EPOCH: u64 = 1_000;
const STREAM_RETRIEVAL_EPOCH: u64 = 2_000;

/// Smallest validation split evaluated during training: recall at 10
/// needs at least ten candidate images.
const MIN_VAL_IMAGES: usize = 10;

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream + epoch as u64))
}

/// Dataset indices that belong to the training split.
pub(crate) fn training_indices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| !is_validation_sample(&dataset.samples[i].id))
        .collect()
}

/// Dataset indices held out for validation.
pub(crate) fn validation_indices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| is_validation_sample(&dataset.samples[i].id))
        .collect()
}

/// Shuffled (sample index, caption index) pairs for one epoch.
fn epoch_pairs(train: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| (i, rng.random_range(0..CAPTIONS_PER_IMAGE)))
        .collect()
}

/// Train both category classifiers on the training split.
///
/// Runs for the configured number of epochs (zero epochs returns the
/// freshly initialized parameters). If a batch produces a non-finite
/// loss, training stops and the checkpoint of the last completed epoch is
/// returned instead, with a warning in the log.
pub fn train_classifiers(dataset: &Dataset, config: &Config) -> Result<Checkpoint> {
    config.validate()?;
    dataset.validate()?;
    let train = training_indices(dataset);
    let captions: Vec<&str> = train
        .iter()
        .flat_map(|&i| dataset.samples[i].captions.iter().map(String::as_str))
        .collect();
    let vocab = build_vocabulary(&captions, 1)?;

    let pair = ClassifierPair::new(vocab.size(), config.embedding_dim, dataset.num_categories);
    let mut params = Params::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_CLASSIFIER_INIT));
    pair.init(&mut params, &mut init_rng);
    let mut adam = Adam::new(&params, config.learning_rate);

    let snapshot = |epoch: usize, history: &[EpochMetrics], params: &Params| {
        Checkpoint::from_params(
            CheckpointKind::Classifiers,
            config,
            &vocab,
            dataset.num_categories,
            epoch,
            history.to_vec(),
            params,
        )
    };

    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut last_good = snapshot(0, &history, &params);

    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(config.seed, STREAM_CLASSIFIER_EPOCH, epoch);
        let pairs = epoch_pairs(&train, &mut rng);
        let mut image_loss_sum = 0.0;
        let mut text_loss_sum = 0.0;

        for chunk in pairs.chunks(config.batch_size) {
            let mut accum = GradAccum::zeros_like(&params);
            for &(i, k) in chunk {
                let sample = &dataset.samples[i];
                let tape = Tape::new();
                let bp = params.bind(&tape);
                let image = pair.image.forward(&tape, &bp, &sample.image)?;
                let image_loss = classification_loss(&tape, image.logits, sample.category)?;
                let (ids, length) = vocab.encode_caption(&sample.captions[k], MAX_CAPTION_LEN);
                let text = pair.text.forward(&tape, &bp, &ids, length);
                let text_loss = classification_loss(&tape, text.logits, sample.category)?;
                let total = tape.add(image_loss, text_loss);
                let value = tape.scalar(total);
                if !value.is_finite() {
                    log::warn!(
                        "classifier training diverged at epoch {}, sample {:?}; \
                         keeping the checkpoint from epoch {}",
                        epoch + 1,
                        sample.id,
                        last_good.epoch
                    );
                    return Ok(last_good);
                }
                image_loss_sum += tape.scalar(image_loss);
                text_loss_sum += tape.scalar(text_loss);
                let grads = tape.backward(total);
                accum.add_scaled(&bp, &grads, 1.0 / chunk.len() as f64);
            }
            adam.step(&mut params, accum.grads());
        }

        let (image_accuracy, text_accuracy) =
            classifier_accuracy(&pair, &params, dataset, &train, &vocab)?;
        let denominator = pairs.len().max(1) as f64;
        let mut metrics = BTreeMap::new();
        metrics.insert("image_loss".to_owned(), image_loss_sum / denominator);
        metrics.insert("text_loss".to_owned(), text_loss_sum / denominator);
        metrics.insert("image_accuracy".to_owned(), image_accuracy);
        metrics.insert("text_accuracy".to_owned(), text_accuracy);
        log::info!(
            "classifiers epoch {}/{}: image loss {:.4} acc {:.3}, text loss {:.4} acc {:.3}",
            epoch + 1,
            config.epochs,
            image_loss_sum / denominator,
            image_accuracy,
            text_loss_sum / denominator,
            text_accuracy
        );
        history.push(EpochMetrics {
            epoch: epoch + 1,
            metrics,
        });
        last_good = snapshot(epoch + 1, &history, &params);
    }

    Ok(last_good)
}

/// Fraction of correctly classified images and captions (all five per
/// image) over the given dataset indices.
pub(crate) fn classifier_accuracy(
    pair: &ClassifierPair,
    params: &Params,
    dataset: &Dataset,
    indices: &[usize],
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let per_sample: Vec<Result<(bool, usize)>> = parallel_map(&samples, |sample| {
        let tape = Tape::inference();
        let bp = params.bind(&tape);
        let image = pair.image.forward(&tape, &bp, &sample.image)?;
        let image_hit = image.predicted == sample.category;
        let mut caption_hits = 0;
        for caption in &sample.captions {
            let (ids, length) = vocab.encode_caption(caption, MAX_CAPTION_LEN);
            let text = pair.text.forward(&tape, &bp, &ids, length);
            caption_hits += usize::from(text.predicted == sample.category);
        }
        Ok((image_hit, caption_hits))
    });

    let mut image_hits = 0usize;
    let mut caption_hits = 0usize;
    for result in per_sample {
        let (image_hit, captions) = result?;
        image_hits += usize::from(image_hit);
        caption_hits += captions;
    }
    let images = indices.len().max(1) as f64;
    let captions = (indices.len() * CAPTIONS_PER_IMAGE).max(1) as f64;
    Ok((image_hits as f64 / images, caption_hits as f64 / captions))
}

/// Train the retrieval network against frozen classifiers.
///
/// The classifier checkpoint's parameters are carried into the result
/// unchanged; only retrieval parameters receive optimizer updates. A
/// non-finite batch loss aborts with [`Error::Diverged`] naming the epoch,
/// batch, and the term that went non-finite.
pub fn train_retrieval(
    dataset: &Dataset,
    classifiers: &Checkpoint,
    config: &Config,
) -> Result<Checkpoint> {
    train_retrieval_cached(dataset, classifiers, config, None)
}

/// [`train_retrieval`] with an optional precomputed classifier cache
/// (the ablation runner shares one per seed across variants).
pub(crate) fn train_retrieval_cached(
    dataset: &Dataset,
    classifiers: &Checkpoint,
    config: &Config,
    shared_cache: Option<&SemanticCache>,
) -> Result<Checkpoint> {
    config.validate()?;
    dataset.validate()?;
    classifiers.require_kind(CheckpointKind::Classifiers)?;
    if classifiers.num_categories != dataset.num_categories {
        return Err(Error::IncompatibleCheckpoint(format!(
            "classifiers were trained for {} categories but the dataset has {}",
            classifiers.num_categories, dataset.num_categories
        )));
    }
    if classifiers.config.embedding_dim != config.embedding_dim {
        return Err(Error::IncompatibleCheckpoint(format!(
            "classifier feature width {} does not match the embedding width {}",
            classifiers.config.embedding_dim, config.embedding_dim
        )));
    }

    let vocab = classifiers.vocabulary.clone();
    let mut params = classifiers.to_params();
    let model = RetrievalModel::new(config, vocab.size());
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_RETRIEVAL_INIT));
    model.init(&mut params, &mut init_rng);

    let needs_semantics = config.use_lsd || config.use_stl;
    let owned_cache = if needs_semantics && shared_cache.is_none() {
        let pair = ClassifierPair::new(
            vocab.size(),
            classifiers.config.embedding_dim,
            classifiers.num_categories,
        );
        Some(SemanticCache::build(&pair, &params, dataset, &vocab)?)
    } else {
        None
    };
    let cache: Option<&SemanticCache> = shared_cache.or(owned_cache.as_ref());

    let train = training_indices(dataset);
    let val = validation_indices(dataset);
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut history: Vec<EpochMetrics> = Vec::new();

    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(config.seed, STREAM_RETRIEVAL_EPOCH, epoch);
        let pairs = epoch_pairs(&train, &mut rng);
        let mut loss_sum = 0.0;

        for (batch_index, chunk) in pairs.chunks(config.batch_size).enumerate() {
            let mut accum = GradAccum::zeros_like(&params);
            let batch_loss = run_retrieval_batch(
                &model, &params, dataset, &vocab, cache, config, chunk, &mut accum,
            )
            .map_err(|e| tag_divergence(e, epoch + 1, batch_index))?;
            loss_sum += batch_loss * chunk.len() as f64;
            adam.step(&mut params, accum.grads());
        }

        let mut metrics = BTreeMap::new();
        let train_loss = loss_sum / pairs.len().max(1) as f64;
        metrics.insert("train_loss".to_owned(), train_loss);
        let mut val_note = String::new();
        if val.len() >= MIN_VAL_IMAGES {
            let fusion = config
                .use_lsd
                .then(|| (cache.expect("semantic cache built"), config.fusion));
            let (images, texts) = embed_split(&model, &params, dataset, &val, &vocab, fusion)?;
            let report = report_from_embeddings(&images, &texts, config.fingerprint())?;
            metrics.insert("val_mean_recall".to_owned(), report.mean_recall);
            val_note = format!(", val mean recall {:.4}", report.mean_recall);
        }
        log::info!(
            "retrieval epoch {}/{}: train loss {train_loss:.5}{val_note}",
            epoch + 1,
            config.epochs
        );
        history.push(EpochMetrics {
            epoch: epoch + 1,
            metrics,
        });
    }

    Ok(Checkpoint::from_params(
        CheckpointKind::Retrieval,
        config,
        &vocab,
        dataset.num_categories,
        config.epochs,
        history,
        &params,
    ))
}

/// Attach epoch/batch coordinates to a divergence raised inside a batch.
fn tag_divergence(error: Error, epoch: usize, batch: usize) -> Error {
    match error {
        Error::Diverged { term, .. } => Error::Diverged { epoch, batch, term },
        other => other,
    }
}

struct SamplePass<'p> {
    tape: Tape,
    bp: BoundParams<'p>,
    image: Var,
    text: Var,
}

/// Forward one batch, compute the ranking loss, and accumulate parameter
/// gradients. Returns the per-pair mean loss.
#[allow(clippy::too_many_arguments)]
fn run_retrieval_batch(
    model: &RetrievalModel,
    params: &Params,
    dataset: &Dataset,
    vocab: &Vocabulary,
    cache: Option<&SemanticCache>,
    config: &Config,
    chunk: &[(usize, usize)],
    accum: &mut GradAccum,
) -> Result<f64> {
    let mut passes = Vec::with_capacity(chunk.len());
    for &(i, k) in chunk {
        let sample = &dataset.samples[i];
        let tape = Tape::new();
        let bp = params.bind(&tape);
        let mut image = model.image_forward(&tape, &bp, &sample.image)?;
        let (ids, length) = vocab.encode_caption(&sample.captions[k], MAX_CAPTION_LEN);
        let mut text = model.text_forward(&tape, &bp, &ids, length);
        if config.use_lsd {
            let cache = cache.expect("semantic cache built");
            image = fuse_with_method(&tape, image, &cache.image_feature[i], config.fusion);
            let caption_slot = i * CAPTIONS_PER_IMAGE + k;
            text = fuse_with_method(&tape, text, &cache.caption_feature[caption_slot], config.fusion);
        }
        passes.push(SamplePass { tape, bp, image, text });
    }

    // Batch-level tape: embeddings enter as leaves, so its backward sweep
    // stops at exactly the per-sample seeds we need.
    let batch_tape = Tape::new();
    let image_leaves: Vec<Var> = passes
        .iter()
        .map(|p| batch_tape.leaf(p.tape.value(p.image)))
        .collect();
    let text_leaves: Vec<Var> = passes
        .iter()
        .map(|p| batch_tape.leaf(p.tape.value(p.text)))
        .collect();
    let images = batch_tape.stack_rows(&image_leaves);
    let texts = batch_tape.stack_rows(&text_leaves);
    let similarity = cosine_matrix(&batch_tape, images, texts)?;

    let beta = if config.use_stl {
        let cache = cache.expect("semantic cache built");
        let image_cats: Vec<usize> = chunk.iter().map(|&(i, _)| cache.image_category[i]).collect();
        let text_cats: Vec<usize> = chunk
            .iter()
            .map(|&(i, k)| cache.caption_category[i * CAPTIONS_PER_IMAGE + k])
            .collect();
        if config.class_boost >= 1.0 {
            BetaMatrix::new(&image_cats, &text_cats, config.class_boost)?
        } else {
            // Sweep-only escape, opted into by config validation.
            BetaMatrix::for_sweep(&image_cats, &text_cats, config.class_boost)
        }
    } else {
        BetaMatrix::ones(chunk.len())
    };

    let raw = semantic_triplet_loss_op(&batch_tape, similarity, &beta, config.margin);
    let loss = batch_tape.scale(raw, 1.0 / chunk.len() as f64);
    let loss_value = batch_tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            batch: 0,
            term: diverged_term(&batch_tape, &passes, similarity, &beta, config.margin),
        });
    }

    let mut grads = batch_tape.backward(loss);
    for (index, pass) in passes.iter().enumerate() {
        if let Some(seed) = grads.take(image_leaves[index]) {
            let sweep = pass.tape.backward_seeded(pass.image, seed);
            accum.add_scaled(&pass.bp, &sweep, 1.0);
        }
        if let Some(seed) = grads.take(text_leaves[index]) {
            let sweep = pass.tape.backward_seeded(pass.text, seed);
            accum.add_scaled(&pass.bp, &sweep, 1.0);
        }
    }
    Ok(loss_value)
}

/// Name the first non-finite quantity in a diverged batch.
fn diverged_term(
    batch_tape: &Tape,
    passes: &[SamplePass<'_>],
    similarity: Var,
    beta: &BetaMatrix,
    margin: f64,
) -> String {
    for pass in passes {
        if pass.tape.with_value(pass.image, |v| v.iter().any(|x| !x.is_finite())) {
            return "image embeddings".to_owned();
        }
        if pass.tape.with_value(pass.text, |v| v.iter().any(|x| !x.is_finite())) {
            return "text embeddings".to_owned();
        }
    }
    let s = batch_tape.value(similarity);
    if s.iter().any(|x| !x.is_finite()) {
        return "similarity matrix".to_owned();
    }
    // Re-derive the two directional hinge sums from the similarity values.
    let s = s.into_dimensionality::<ndarray::Ix2>().expect("square matrix");
    let b = beta.values();
    let n = s.nrows();
    let mut image_to_text = 0.0;
    let mut text_to_image = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            image_to_text += (margin - b[(i, i)] * s[(i, i)] + b[(i, j)] * s[(i, j)]).max(0.0);
            text_to_image += (margin - b[(j, j)] * s[(j, j)] + b[(i, j)] * s[(i, j)]).max(0.0);
        }
    }
    if !image_to_text.is_finite() {
        "image-to-text ranking term".to_owned()
    } else if !text_to_image.is_finite() {
        "text-to-image ranking term".to_owned()
    } else {
        "loss".to_owned()
    }
}
