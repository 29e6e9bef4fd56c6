//! Split-level evaluation: full similarity matrices, recall-at-K in both
//! query directions, mean recall, ranked single-query search, and an
//! independent brute-force recall oracle used to cross-check the fast
//! implementation.

use crate::data::CAPTIONS_PER_IMAGE;
use crate::matching::similarity;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Which side issues the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryDirection {
    ImageToText,
    TextToImage,
}

/// Image↔caption correspondence: every caption belongs to exactly one
/// image and every image owns exactly [`CAPTIONS_PER_IMAGE`] captions.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    caption_to_image: Vec<usize>,
    image_to_captions: Vec<[usize; CAPTIONS_PER_IMAGE]>,
}

impl GroundTruth {
    /// Build from the caption→image assignment, validating the
    /// exactly-five-captions invariant.
    pub fn new(caption_to_image: Vec<usize>, num_images: usize) -> Result<Self> {
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); num_images];
        for (caption, &image) in caption_to_image.iter().enumerate() {
            if image >= num_images {
                return Err(Error::InvalidGroundTruth(format!(
                    "caption {caption} maps to image {image}, but only {num_images} images exist"
                )));
            }
            buckets[image].push(caption);
        }
        let mut image_to_captions = Vec::with_capacity(num_images);
        for (image, bucket) in buckets.into_iter().enumerate() {
            let n = bucket.len();
            image_to_captions.push(<[usize; CAPTIONS_PER_IMAGE]>::try_from(bucket).map_err(
                |_| {
                    Error::InvalidGroundTruth(format!(
                        "image {image} has {n} captions; expected {CAPTIONS_PER_IMAGE}"
                    ))
                },
            )?);
        }
        Ok(GroundTruth {
            caption_to_image,
            image_to_captions,
        })
    }

    /// The dataset layout: image `i` owns the contiguous caption block
    /// `5i .. 5i+5`.
    pub fn contiguous(num_images: usize) -> Self {
        let caption_to_image = (0..num_images * CAPTIONS_PER_IMAGE)
            .map(|c| c / CAPTIONS_PER_IMAGE)
            .collect();
        Self::new(caption_to_image, num_images).expect("contiguous layout is always valid")
    }

    pub fn num_images(&self) -> usize {
        self.image_to_captions.len()
    }

    pub fn num_captions(&self) -> usize {
        self.caption_to_image.len()
    }

    pub fn captions_of(&self, image: usize) -> &[usize; CAPTIONS_PER_IMAGE] {
        &self.image_to_captions[image]
    }

    pub fn image_of(&self, caption: usize) -> usize {
        self.caption_to_image[caption]
    }
}

/// Cosine similarity of every image embedding against every text
/// embedding: `(n_images, d) × (n_texts, d) → (n_images, n_texts)`.
pub fn similarity_matrix(images: &Array2<f64>, texts: &Array2<f64>) -> Result<Array2<f64>> {
    assert_eq!(
        images.ncols(),
        texts.ncols(),
        "embedding dimensions must match"
    );
    for (side, set) in [("image", images), ("text", texts)] {
        for (index, row) in set.rows().into_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateEmbedding { side, index });
            }
        }
    }
    let mut out = Array2::zeros((images.nrows(), texts.nrows()));
    for (i, a) in images.rows().into_iter().enumerate() {
        for (j, b) in texts.rows().into_iter().enumerate() {
            out[(i, j)] =
                similarity(a.as_slice().unwrap(), b.as_slice().unwrap())?;
        }
    }
    Ok(out)
}

fn check_rank_inputs(
    s: &Array2<f64>,
    gt: &GroundTruth,
    k: usize,
    direction: QueryDirection,
) -> Result<()> {
    if s.nrows() != gt.num_images() || s.ncols() != gt.num_captions() {
        return Err(Error::InvalidRanking {
            reason: format!(
                "similarity matrix is {}x{} but ground truth describes {} images / {} captions",
                s.nrows(),
                s.ncols(),
                gt.num_images(),
                gt.num_captions()
            ),
        });
    }
    if k == 0 {
        return Err(Error::InvalidRanking {
            reason: "K must be at least 1".to_owned(),
        });
    }
    let candidates = match direction {
        QueryDirection::ImageToText => s.ncols(),
        QueryDirection::TextToImage => s.nrows(),
    };
    if k > candidates {
        return Err(Error::InvalidRanking {
            reason: format!("K={k} exceeds the {candidates} available candidates"),
        });
    }
    Ok(())
}

/// Fraction of queries whose ground truth appears in the top-K ranked
/// candidates. Ranking is by descending score with ascending-index
/// tie-break. Implemented by rank counting — no sorting — so the
/// brute-force [`oracle_recall`] is a genuinely independent check.
pub fn recall_at_k(
    s: &Array2<f64>,
    gt: &GroundTruth,
    k: usize,
    direction: QueryDirection,
) -> Result<f64> {
    check_rank_inputs(s, gt, k, direction)?;
    match direction {
        QueryDirection::ImageToText => {
            let mut hits = 0usize;
            for i in 0..s.nrows() {
                let row = s.row(i);
                // An image query succeeds when any of its captions ranks
                // in the top K; the best caption decides.
                let hit = gt.captions_of(i).iter().any(|&c| {
                    let target = row[c];
                    let ahead = row
                        .iter()
                        .enumerate()
                        .filter(|&(j, &v)| v > target || (v == target && j < c))
                        .count();
                    ahead < k
                });
                hits += hit as usize;
            }
            Ok(hits as f64 / s.nrows() as f64)
        }
        QueryDirection::TextToImage => {
            let mut hits = 0usize;
            for c in 0..s.ncols() {
                let col = s.column(c);
                let target = col[gt.image_of(c)];
                let ahead = col
                    .iter()
                    .enumerate()
                    .filter(|&(i, &v)| {
                        v > target || (v == target && i < gt.image_of(c))
                    })
                    .count();
                hits += (ahead < k) as usize;
            }
            Ok(hits as f64 / s.ncols() as f64)
        }
    }
}

/// Brute-force recall: fully sort every query's candidate list and test
/// the top-K set. Same contract as [`recall_at_k`], deliberately
/// implemented from scratch as its oracle.
pub fn oracle_recall(
    s: &Array2<f64>,
    gt: &GroundTruth,
    k: usize,
    direction: QueryDirection,
) -> Result<f64> {
    check_rank_inputs(s, gt, k, direction)?;
    let top_k = |scores: Vec<f64>| -> Vec<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        order
    };
    match direction {
        QueryDirection::ImageToText => {
            let mut hits = 0usize;
            for i in 0..s.nrows() {
                let best = top_k(s.row(i).to_vec());
                if best.iter().any(|j| gt.captions_of(i).contains(j)) {
                    hits += 1;
                }
            }
            Ok(hits as f64 / s.nrows() as f64)
        }
        QueryDirection::TextToImage => {
            let mut hits = 0usize;
            for c in 0..s.ncols() {
                let best = top_k(s.column(c).to_vec());
                if best.contains(&gt.image_of(c)) {
                    hits += 1;
                }
            }
            Ok(hits as f64 / s.ncols() as f64)
        }
    }
}

/// Arithmetic mean of the six standard recalls.
pub fn mean_recall(recalls: &[f64; 6]) -> f64 {
    recalls.iter().sum::<f64>() / 6.0
}

/// Rank a whole corpus against one query embedding, best first. Ties
/// break toward the smaller index.
pub fn rank_query(
    query: &[f64],
    corpus: &Array2<f64>,
    top_k: usize,
) -> Result<Vec<(usize, f64)>> {
    if corpus.nrows() == 0 {
        return Err(Error::InvalidRanking {
            reason: "empty corpus".to_owned(),
        });
    }
    if top_k > corpus.nrows() {
        return Err(Error::InvalidRanking {
            reason: format!(
                "top_k={top_k} exceeds the corpus size {}",
                corpus.nrows()
            ),
        });
    }
    let mut scored = Vec::with_capacity(corpus.nrows());
    for (index, row) in corpus.rows().into_iter().enumerate() {
        let score = similarity(query, row.as_slice().unwrap()).map_err(|_| {
            Error::DegenerateEmbedding {
                side: "corpus",
                index,
            }
        })?;
        scored.push((index, score));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored)
}

/// The seven evaluation numbers plus the fingerprint of the config that
/// produced them, serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub mean_recall: f64,
    pub config_fingerprint: String,
}

impl RetrievalReport {
    pub fn from_recalls(i2t: [f64; 3], t2i: [f64; 3], config_fingerprint: String) -> Self {
        let all = [i2t[0], i2t[1], i2t[2], t2i[0], t2i[1], t2i[2]];
        RetrievalReport {
            i2t_r1: i2t[0],
            i2t_r5: i2t[1],
            i2t_r10: i2t[2],
            t2i_r1: t2i[0],
            t2i_r5: t2i[1],
            t2i_r10: t2i[2],
            mean_recall: mean_recall(&all),
            config_fingerprint,
        }
    }

    pub fn recalls(&self) -> [f64; 6] {
        [
            self.i2t_r1,
            self.i2t_r5,
            self.i2t_r10,
            self.t2i_r1,
            self.t2i_r5,
            self.t2i_r10,
        ]
    }

    /// Aligned text table of the report.
    pub fn table(&self) -> String {
        format!(
            "{:<12} {:>8} {:>8} {:>8}\n{:<12} {:>8.4} {:>8.4} {:>8.4}\n\
             {:<12} {:>8.4} {:>8.4} {:>8.4}\n{:<12} {:>8.4}\n",
            "", "R@1", "R@5", "R@10",
            "image->text", self.i2t_r1, self.i2t_r5, self.i2t_r10,
            "text->image", self.t2i_r1, self.t2i_r5, self.t2i_r10,
            "mean recall", self.mean_recall,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn similarity_matrix_shapes_and_trivial_cases() {
        let mut r = rng(0);
        let a = Array2::from_shape_fn((4, 6), |_| r.random_range(-1.0..1.0));
        let s = similarity_matrix(&a, &a).unwrap();
        for i in 0..4 {
            assert!((s[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert_eq!(s[(i, j)], s[(j, i)]);
            }
        }

        let eye = Array2::from_shape_fn((3, 3), |(i, j)| f64::from(i == j));
        let s = similarity_matrix(&eye, &eye).unwrap();
        assert_eq!(s, Array2::from_shape_fn((3, 3), |(i, j)| f64::from(i == j)));

        let b = Array2::from_shape_fn((2, 6), |_| r.random_range(-1.0..1.0));
        let c = Array2::from_shape_fn((3, 6), |_| r.random_range(-1.0..1.0));
        assert_eq!(similarity_matrix(&b, &c).unwrap().dim(), (2, 3));
    }

    #[test]
    fn similarity_matrix_reports_the_zero_row() {
        let mut a = Array2::from_elem((3, 4), 0.5);
        a.row_mut(2).fill(0.0);
        let b = Array2::from_elem((2, 4), 0.3);
        let err = similarity_matrix(&a, &b).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateEmbedding { side: "image", index: 2 }
        ));
        let err = similarity_matrix(&b, &a).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateEmbedding { side: "text", index: 2 }
        ));
    }

    #[test]
    fn ground_truth_validates_its_invariants() {
        let gt = GroundTruth::contiguous(3);
        assert_eq!(gt.num_images(), 3);
        assert_eq!(gt.num_captions(), 15);
        assert_eq!(gt.captions_of(1), &[5, 6, 7, 8, 9]);
        assert_eq!(gt.image_of(12), 2);

        let err = GroundTruth::new(vec![0, 0, 0, 0, 0, 7], 2).unwrap_err();
        assert!(err.to_string().contains("image 7"));

        // Image 1 ends up with 4 captions, image 0 with 6.
        let err = GroundTruth::new(
            vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1],
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("expected 5"), "{err}");
    }

    /// Block layout: each image's own captions strictly highest.
    fn block_matrix(num_images: usize) -> Array2<f64> {
        Array2::from_shape_fn((num_images, num_images * 5), |(i, j)| {
            if j / 5 == i {
                0.9
            } else {
                0.1
            }
        })
    }

    #[test]
    fn perfect_block_ranking_gives_full_recall_at_one() {
        let s = block_matrix(4);
        let gt = GroundTruth::contiguous(4);
        for direction in [QueryDirection::ImageToText, QueryDirection::TextToImage] {
            assert_eq!(recall_at_k(&s, &gt, 1, direction).unwrap(), 1.0);
            assert_eq!(oracle_recall(&s, &gt, 1, direction).unwrap(), 1.0);
        }
    }

    #[test]
    fn rank_six_ground_truth_fails_at_five_and_hits_at_ten() {
        // 8 images, 40 captions. Row i: the five captions of image
        // (i+1) mod 8 score highest, own captions come exactly 6th–10th.
        let n = 8;
        let mut s = Array2::from_elem((n, n * 5), 0.0);
        for i in 0..n {
            for k in 0..5 {
                s[(i, ((i + 1) % n) * 5 + k)] = 0.9;
                s[(i, i * 5 + k)] = 0.5;
            }
        }
        let gt = GroundTruth::contiguous(n);
        let r5 = recall_at_k(&s, &gt, 5, QueryDirection::ImageToText).unwrap();
        let r10 = recall_at_k(&s, &gt, 10, QueryDirection::ImageToText).unwrap();
        assert_eq!(r5, 0.0);
        assert_eq!(r10, 1.0);
        // The per-column construction mirrors it: each caption's true
        // image sits at rank 6 (five other images score higher).
        let mut st = Array2::from_elem((n, n * 5), 0.0);
        for j in 0..n * 5 {
            let own = j / 5;
            for i in 0..n {
                st[(i, j)] = if i == own {
                    0.5
                } else if (1..=5).contains(&((i + n - own) % n)) {
                    0.9
                } else {
                    0.1
                };
            }
        }
        assert_eq!(
            recall_at_k(&st, &gt, 5, QueryDirection::TextToImage).unwrap(),
            0.0
        );
        assert_eq!(
            recall_at_k(&st, &gt, 6, QueryDirection::TextToImage).unwrap(),
            1.0
        );
        assert_eq!(
            oracle_recall(&st, &gt, 5, QueryDirection::TextToImage).unwrap(),
            0.0
        );
        assert_eq!(
            oracle_recall(&st, &gt, 6, QueryDirection::TextToImage).unwrap(),
            1.0
        );
    }

    #[test]
    fn fast_recall_equals_the_oracle_on_randomized_instances() {
        let mut r = rng(1);
        for trial in 0..100 {
            let num_images = 50;
            // Coarse quantization provokes plenty of ties.
            let s = Array2::from_shape_fn((num_images, num_images * 5), |_| {
                (r.random_range(-1.0_f64..1.0) * 8.0).round() / 8.0
            });
            let gt = GroundTruth::contiguous(num_images);
            for k in [1, 5, 10] {
                for direction in
                    [QueryDirection::ImageToText, QueryDirection::TextToImage]
                {
                    let fast = recall_at_k(&s, &gt, k, direction).unwrap();
                    let slow = oracle_recall(&s, &gt, k, direction).unwrap();
                    assert_eq!(fast, slow, "trial {trial}, K={k}, {direction:?}");
                }
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut r = rng(2);
        let s = Array2::from_shape_fn((10, 50), |_| r.random_range(-1.0..1.0));
        let gt = GroundTruth::contiguous(10);
        for direction in [QueryDirection::ImageToText, QueryDirection::TextToImage] {
            let limit = match direction {
                QueryDirection::ImageToText => 50,
                QueryDirection::TextToImage => 10,
            };
            let mut previous = 0.0;
            for k in 1..=limit {
                let r = recall_at_k(&s, &gt, k, direction).unwrap();
                assert!(r >= previous, "recall dropped at K={k}");
                previous = r;
            }
            assert_eq!(previous, 1.0, "full K must find every ground truth");
        }
    }

    #[test]
    fn recall_rejects_bad_k() {
        let s = block_matrix(2);
        let gt = GroundTruth::contiguous(2);
        assert!(recall_at_k(&s, &gt, 0, QueryDirection::ImageToText).is_err());
        assert!(recall_at_k(&s, &gt, 11, QueryDirection::ImageToText).is_err());
        assert!(recall_at_k(&s, &gt, 3, QueryDirection::TextToImage).is_err());
        assert!(oracle_recall(&s, &gt, 11, QueryDirection::ImageToText).is_err());
        // K = candidate count is the largest legal value.
        assert!(recall_at_k(&s, &gt, 10, QueryDirection::ImageToText).is_ok());
        assert!(recall_at_k(&s, &gt, 2, QueryDirection::TextToImage).is_ok());
    }

    #[test]
    fn mean_recall_examples() {
        assert_eq!(mean_recall(&[1.0; 6]), 1.0);
        let recalls = [0.1, 0.2, 0.3, 0.1, 0.2, 0.3];
        assert!((mean_recall(&recalls) - 0.2).abs() < 1e-15);
        let permuted = [0.3, 0.1, 0.2, 0.3, 0.2, 0.1];
        assert_eq!(mean_recall(&recalls), mean_recall(&permuted));
    }

    #[test]
    fn rank_query_contract() {
        let mut r = rng(3);
        let corpus = Array2::from_shape_fn((6, 4), |_| r.random_range(-1.0..1.0));
        let query = corpus.row(3).to_vec();

        let ranked = rank_query(&query, &corpus, 6).unwrap();
        assert_eq!(ranked[0].0, 3);
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);
        // A permutation of all indices, scores non-increasing.
        let mut indices: Vec<usize> = ranked.iter().map(|&(i, _)| i).collect();
        for pair in ranked.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
        indices.sort_unstable();
        assert_eq!(indices, (0..6).collect::<Vec<_>>());

        // Positive scaling of the corpus leaves the order unchanged.
        let scaled = &corpus * 2.5;
        let ranked_scaled = rank_query(&query, &scaled, 6).unwrap();
        let order: Vec<usize> = ranked_scaled.iter().map(|&(i, _)| i).collect();
        let base_order: Vec<usize> = ranked.iter().map(|&(i, _)| i).collect();
        assert_eq!(order, base_order);

        assert!(rank_query(&query, &corpus, 7).is_err());
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(rank_query(&query, &empty, 0).is_err());
    }

    #[test]
    fn report_mean_and_serialization() {
        let report = RetrievalReport::from_recalls(
            [0.3, 0.7, 0.9],
            [0.2, 0.6, 0.8],
            "abc123".to_owned(),
        );
        assert!((report.mean_recall - 0.583_333_333_333_333_4).abs() < 1e-12);

        let json = serde_json::to_string(&report).unwrap();
        // Flat object: every field at the top level.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("i2t_r1").is_some());
        assert!(value.get("config_fingerprint").is_some());
        let back: RetrievalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let table = report.table();
        assert!(table.contains("R@10") && table.contains("mean recall"));
        assert!(table.contains("0.5833"));
    }

    #[test]
    fn hand_checked_two_image_recall() {
        let s = arr2(&[
            [0.9, 0.1, 0.2, 0.3, 0.4, 0.85, 0.1, 0.1, 0.1, 0.1],
            [0.1, 0.1, 0.1, 0.1, 0.1, 0.6, 0.2, 0.2, 0.2, 0.2],
        ]);
        let gt = GroundTruth::contiguous(2);
        // Image 0: caption 0 ranks first → hit at K=1. Image 1: caption 5
        // ranks first in its row → hit. R@1 = 1.0.
        assert_eq!(
            recall_at_k(&s, &gt, 1, QueryDirection::ImageToText).unwrap(),
            1.0
        );
        // Caption 5's column: image 0 scores 0.85 > image 1's 0.6, so the
        // true image sits at rank 2.
        let t2i_r1 = recall_at_k(&s, &gt, 1, QueryDirection::TextToImage).unwrap();
        let expected = 9.0 / 10.0;
        assert!((t2i_r1 - expected).abs() < 1e-15, "got {t2i_r1}");
    }
}
