//! Similarity and ranking losses: cosine similarity, the baseline
//! bidirectional triplet loss, the category-agreement boost matrix, and
//! the semantically boosted triplet loss.
//!
//! Every loss exists in a pure form over plain matrices (used by tests
//! and evaluation) and, where training needs it, as a tape operation
//! with an analytic backward pass.

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};

/// Default hinge margin of both triplet losses.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Default boost applied to same-category pairs.
pub const DEFAULT_CLASS_BOOST: f64 = 1.2;

/// Cosine similarity of two equal-length vectors. Errors on zero
/// magnitude, where the cosine is undefined.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "similarity: dimension mismatch");
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(Error::DegenerateEmbedding { side: "left", index: 0 });
    }
    if nb == 0.0 {
        return Err(Error::DegenerateEmbedding { side: "right", index: 0 });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Pairwise category-agreement boosts: entry `(i, j)` is `boost` when
/// image `i` and text `j` received the same predicted category, else 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaMatrix {
    values: Array2<f64>,
    boost: f64,
}

impl BetaMatrix {
    /// Build from predicted categories. The boost must be ≥ 1: a boost
    /// below one would weaken matched pairs instead of emphasizing them.
    pub fn new(image_cats: &[usize], text_cats: &[usize], boost: f64) -> Result<Self> {
        if boost < 1.0 {
            return Err(Error::BoostBelowOne { got: boost });
        }
        Ok(Self::build(image_cats, text_cats, boost))
    }

    /// Build without the ≥ 1 restriction (still must be positive). Only
    /// the boost-sensitivity sweep uses this, to probe deliberately
    /// out-of-contract values.
    pub fn for_sweep(image_cats: &[usize], text_cats: &[usize], boost: f64) -> Self {
        assert!(boost > 0.0, "boost must be positive");
        Self::build(image_cats, text_cats, boost)
    }

    fn build(image_cats: &[usize], text_cats: &[usize], boost: f64) -> Self {
        assert_eq!(
            image_cats.len(),
            text_cats.len(),
            "category lists must pair up"
        );
        let n = image_cats.len();
        let values = Array2::from_shape_fn((n, n), |(i, j)| {
            if image_cats[i] == text_cats[j] {
                boost
            } else {
                1.0
            }
        });
        BetaMatrix { values, boost }
    }

    /// All-ones matrix: the boost-free degenerate case.
    pub fn ones(n: usize) -> Self {
        BetaMatrix {
            values: Array2::ones((n, n)),
            boost: 1.0,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn boost(&self) -> f64 {
        self.boost
    }
}

/// Baseline bidirectional triplet loss: for every ground-truth pair
/// (diagonal), every other column entry in its row and every other row
/// entry in its column is pushed below the pair by the margin. Summed
/// (not averaged) over all hinges.
pub fn triplet_loss(s: &Array2<f64>, margin: f64) -> f64 {
    assert!(s.is_square(), "similarity matrix must be square");
    assert!(margin >= 0.0, "margin must be non-negative");
    let n = s.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // Negative text for image i …
            total += (margin - s[(i, i)] + s[(i, j)]).max(0.0);
            // … and negative image for text j.
            total += (margin - s[(j, j)] + s[(i, j)]).max(0.0);
        }
    }
    total
}

/// Boosted triplet loss: the positive term is scaled by the diagonal
/// pair's boost, each negative term by that pair's own boost.
pub fn semantic_triplet_loss(s: &Array2<f64>, beta: &BetaMatrix, margin: f64) -> f64 {
    assert!(s.is_square(), "similarity matrix must be square");
    assert!(margin >= 0.0, "margin must be non-negative");
    let b = beta.values();
    assert_eq!(b.dim(), s.dim(), "boost matrix must match the batch");
    let n = s.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            total += (margin - b[(i, i)] * s[(i, i)] + b[(i, j)] * s[(i, j)]).max(0.0);
            total += (margin - b[(j, j)] * s[(j, j)] + b[(i, j)] * s[(i, j)]).max(0.0);
        }
    }
    total
}

/// Tape operation: cosine similarity matrix of two row-stacked embedding
/// sets, `(N, d) × (N, d) → (N, N)`. Errors when any row has zero
/// magnitude, naming the side and row.
pub fn cosine_matrix(tape: &Tape, images: Var, texts: Var) -> Result<Var> {
    tape.check(images);
    tape.check(texts);
    let (pa, pb) = (images.idx as usize, texts.idx as usize);

    fn norms(m: &Array2<f64>, side: &'static str) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(m.nrows());
        for (i, row) in m.rows().into_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateEmbedding { side, index: i });
            }
            out[i] = n;
        }
        Ok(out)
    }

    let out = {
        let a = tape.value(images).into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = tape.value(texts).into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a.dim(), b.dim(), "embedding sets must share shape");
        let na = norms(&a, "image")?;
        let nb = norms(&b, "text")?;
        let an = &a / &na.view().insert_axis(Axis(1));
        let bn = &b / &nb.view().insert_axis(Axis(1));
        an.dot(&bn.t()).into_dyn()
    };

    Ok(tape.push(
        out,
        Some(Box::new(move |nodes, i, g, sink| {
            let a = nodes[pa].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let b = nodes[pb].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let s = nodes[i].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let na = a.rows().into_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect::<Array1<f64>>();
            let nb = b.rows().into_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect::<Array1<f64>>();
            let an = &a / &na.view().insert_axis(Axis(1));
            let bn = &b / &nb.view().insert_axis(Axis(1));

            // d s_ij / d a_i = (bn_j − s_ij · an_i) / na_i.
            let gs = (&g2 * &s).sum_axis(Axis(1));
            let mut ga = g2.dot(&bn);
            for (mut row, (&coef, (&norm, an_row))) in ga
                .rows_mut()
                .into_iter()
                .zip(gs.iter().zip(na.iter().zip(an.rows())))
            {
                row.zip_mut_with(&an_row, |r, &u| *r = (*r - coef * u) / norm);
            }
            sink(pa, ga.into_dyn());

            let gt = (&g2 * &s).sum_axis(Axis(0));
            let mut gb = g2.t().dot(&an);
            for (mut row, (&coef, (&norm, bn_row))) in gb
                .rows_mut()
                .into_iter()
                .zip(gt.iter().zip(nb.iter().zip(bn.rows())))
            {
                row.zip_mut_with(&bn_row, |r, &u| *r = (*r - coef * u) / norm);
            }
            sink(pb, gb.into_dyn());
        })),
    ))
}

/// Tape operation: the boosted triplet loss over a similarity-matrix
/// variable, with the boost matrix as a constant. The hinge subgradient
/// at an exact kink is taken as zero.
pub fn semantic_triplet_loss_op(
    tape: &Tape,
    similarities: Var,
    beta: &BetaMatrix,
    margin: f64,
) -> Var {
    tape.check(similarities);
    let p = similarities.idx as usize;
    let b = beta.values().clone();
    let out = {
        let s = tape
            .value(similarities)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        ndarray::arr0(semantic_triplet_loss(&s, beta, margin)).into_dyn()
    };
    tape.push(
        out,
        Some(Box::new(move |nodes, _, g, sink| {
            let s = nodes[p].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gs = g[ndarray::IxDyn(&[])];
            let n = s.nrows();
            let mut grad = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    if margin - b[(i, i)] * s[(i, i)] + b[(i, j)] * s[(i, j)] > 0.0 {
                        grad[(i, j)] += b[(i, j)] * gs;
                        grad[(i, i)] -= b[(i, i)] * gs;
                    }
                    if margin - b[(j, j)] * s[(j, j)] + b[(i, j)] * s[(i, j)] > 0.0 {
                        grad[(i, j)] += b[(i, j)] * gs;
                        grad[(j, j)] -= b[(j, j)] * gs;
                    }
                }
            }
            sink(p, grad.into_dyn());
        })),
    )
}
