//! Label-supervised semantic decoupling: independent category classifiers
//! for both modalities, multiplicative fusion of their penultimate
//! features into the retrieval embeddings, and the classification losses
//! that train them.
//!
//! The classifiers are trained in a first phase and frozen afterwards;
//! their features act as a category prior gating the retrieval
//! embeddings.

use crate::autodiff::{Tape, Var};
use crate::encoders::{BackboneConfig, ImageBackbone, TextEncoder};
use crate::nn::{BoundParams, Linear, Params};
use crate::{Error, Result};
use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha8Rng;

/// Output of one classifier pass: the penultimate category feature (the
/// semantic gate), raw class logits, and the argmax class.
#[derive(Clone, Copy, Debug)]
pub struct CategoryPrediction {
    /// Sigmoid-activated feature of dimension `dim`; strictly positive,
    /// so fusing with it never zeroes an embedding.
    pub feature: Var,
    /// Raw class scores of dimension `num_classes`.
    pub logits: Var,
    /// `argmax(logits)` with smallest-index tie-break.
    pub predicted: usize,
}

/// Smallest-index argmax.
fn argmax(values: &ArrayD<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

fn predict(tape: &Tape, feature: Var, logits: Var) -> CategoryPrediction {
    CategoryPrediction {
        feature,
        logits,
        predicted: tape.with_value(logits, argmax),
    }
}

/// Image-side classifier: its own backbone (same family as the retrieval
/// encoder, separate parameters), global average pooling, a linear layer
/// with sigmoid producing the category feature, and a final linear layer
/// producing class logits.
#[derive(Clone, Debug)]
pub struct ImageClassifier {
    backbone: ImageBackbone,
    to_feature: Linear,
    to_logits: Linear,
    num_classes: usize,
}

impl ImageClassifier {
    pub fn new(prefix: &str, backbone: &BackboneConfig, dim: usize, num_classes: usize) -> Self {
        let bb = ImageBackbone::new(&format!("{prefix}.backbone"), backbone);
        let channels = bb.out_channels();
        ImageClassifier {
            backbone: bb,
            to_feature: Linear::new(format!("{prefix}.to_feature"), channels, dim),
            to_logits: Linear::new(format!("{prefix}.to_logits"), dim, num_classes),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.backbone.init(params, rng);
        self.to_feature.init(params, rng);
        self.to_logits.init(params, rng);
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        image: &Array3<f64>,
    ) -> Result<CategoryPrediction> {
        let fg = self.backbone.forward(tape, bp, image)?;
        let pooled = tape.spatial_mean(fg.var);
        let feature = tape.sigmoid(self.to_feature.forward(tape, bp, pooled));
        let logits = self.to_logits.forward(tape, bp, feature);
        Ok(predict(tape, feature, logits))
    }
}

/// Text-side classifier: its own recurrent encoder (separate parameters
/// from the retrieval text encoder), a linear layer with sigmoid
/// producing the category feature, and a final linear layer for logits.
#[derive(Clone, Debug)]
pub struct TextClassifier {
    encoder: TextEncoder,
    to_feature: Linear,
    to_logits: Linear,
    num_classes: usize,
}

impl TextClassifier {
    pub fn new(prefix: &str, vocab_size: usize, dim: usize, num_classes: usize) -> Self {
        TextClassifier {
            encoder: TextEncoder::new(&format!("{prefix}.encoder"), vocab_size, dim),
            to_feature: Linear::new(format!("{prefix}.to_feature"), dim, dim),
            to_logits: Linear::new(format!("{prefix}.to_logits"), dim, num_classes),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.encoder.init(params, rng);
        self.to_feature.init(params, rng);
        self.to_logits.init(params, rng);
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams<'_>,
        ids: &[usize],
        length: usize,
    ) -> CategoryPrediction {
        let encoded = self.encoder.forward(tape, bp, ids, length);
        let feature = tape.sigmoid(self.to_feature.forward(tape, bp, encoded.var));
        let logits = self.to_logits.forward(tape, bp, feature);
        predict(tape, feature, logits)
    }
}

/// Elementwise product of an embedding with a category feature — the
/// semantic gate applied to both modalities before matching.
pub fn semantic_fuse(tape: &Tape, embedding: Var, category: &CategoryPrediction) -> Result<Var> {
    let a = tape.shape(embedding);
    let b = tape.shape(category.feature);
    if a != b {
        return Err(Error::ShapeMismatch {
            context: "semantic fusion",
            expected: a,
            got: b,
        });
    }
    Ok(tape.mul(embedding, category.feature))
}

/// Softmax cross-entropy of one logit vector against an integer label,
/// computed in log-sum-exp form for stability. This is the standard
/// c-way reading of the classification loss.
pub fn classification_loss(tape: &Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.shape(logits)[0];
    if label >= c {
        return Err(Error::LabelOutOfRange {
            got: label,
            num_classes: c,
        });
    }
    let p = logits.idx as usize;
    let out = tape.with_value(logits, |x| {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ndarray::arr0(lse - x[[label]]).into_dyn()
    });
    Ok(tape.push(
        out,
        Some(Box::new(move |nodes, _, g, sink| {
            let x = &nodes[p].value;
            let gs = g[ndarray::IxDyn(&[])];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
            let mut gx = x.mapv(|v| (v - m).exp() / z * gs);
            gx[[label]] -= gs;
            sink(p, gx);
        })),
    ))
}

/// Literal per-class binary cross-entropy against the one-hot label:
/// each class contributes an independent sigmoid cross-entropy term and
/// the terms are summed. Available as a configuration alternative to the
/// softmax form.
pub fn binary_classification_loss(tape: &Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.shape(logits)[0];
    if label >= c {
        return Err(Error::LabelOutOfRange {
            got: label,
            num_classes: c,
        });
    }
    let p = logits.idx as usize;
    // Stable per-class term: max(x,0) − x·y + ln(1 + exp(−|x|)).
    let out = tape.with_value(logits, |x| {
        let total: f64 = x
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let y = if k == label { 1.0 } else { 0.0 };
                v.max(0.0) - v * y + (-v.abs()).exp().ln_1p()
            })
            .sum();
        ndarray::arr0(total).into_dyn()
    });
    Ok(tape.push(
        out,
        Some(Box::new(move |nodes, _, g, sink| {
            let x = &nodes[p].value;
            let gs = g[ndarray::IxDyn(&[])];
            let gx = ndarray::ArrayD::from_shape_fn(x.raw_dim(), |idx| {
                let k = idx[0];
                let y = if k == label { 1.0 } else { 0.0 };
                let sig = 1.0 / (1.0 + (-x[[k]]).exp());
                (sig - y) * gs
            });
            sink(p, gx);
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            channels: vec![4, 6],
            strides: vec![2, 2],
        }
    }

    #[test]
    fn zeroed_final_layer_predicts_class_zero_by_tie_break() {
        let cls = ImageClassifier::new("cls", &small_backbone(), 5, 8);
        let mut params = Params::new();
        cls.init(&mut params, &mut rng(0));
        params.get_mut("cls.to_logits.w").fill(0.0);
        params.get_mut("cls.to_logits.b").fill(0.0);
        let tape = Tape::inference();
        let bp = params.bind(&tape);
        let mut r = rng(1);
        let image = Array3::from_shape_fn((16, 16, 3), |_| r.random_range(0.0..1.0));
        let pred = cls.forward(&tape, &bp, &image).unwrap();
        assert_eq!(tape.shape(pred.logits), vec![8]);
        assert!(tape.with_value(pred.logits, |v| v.iter().all(|&x| x == 0.0)));
        assert_eq!(pred.predicted, 0);
        // The gate is sigmoid-activated: strictly inside (0, 1).
        assert!(tape.with_value(pred.feature, |v| v.iter().all(|&x| x > 0.0 && x < 1.0)));
    }

    #[test]
    fn text_classifier_is_total_and_deterministic() {
        let cls = TextClassifier::new("tcls", 12, 6, 4);
        let mut params = Params::new();
        cls.init(&mut params, &mut rng(2));
        let tape = Tape::inference();
        let bp = params.bind(&tape);

        // Empty caption: prediction from the initial state, no crash.
        let empty = cls.forward(&tape, &bp, &[], 0);
        assert!(empty.predicted < 4);

        let a = cls.forward(&tape, &bp, &[2, 5, 3, 0], 3);
        let b = cls.forward(&tape, &bp, &[2, 5, 3, 0], 3);
        assert_eq!(tape.value(a.logits), tape.value(b.logits));
        assert_eq!(a.predicted, b.predicted);
    }

    #[test]
    fn argmax_shift_invariance() {
        let tape = Tape::inference();
        let logits = tape.leaf(arr1(&[0.3, 1.7, -0.5, 1.7]).into_dyn());
        let shifted = tape.add_const(
            logits,
            &ndarray::ArrayD::from_elem(ndarray::IxDyn(&[4]), 100.0),
        );
        let q0 = tape.with_value(logits, argmax);
        let q1 = tape.with_value(shifted, argmax);
        assert_eq!(q0, q1);
        assert_eq!(q0, 1, "ties break toward the smaller index");
    }

    #[test]
    fn semantic_fuse_identity_annihilator_and_hand_value() {
        let tape = Tape::inference();
        let dummy_logits = tape.leaf(arr1(&[0.0]).into_dyn());
        let fuse_with = |feat: &[f64], emb: &[f64]| {
            let cat = CategoryPrediction {
                feature: tape.leaf(arr1(feat).into_dyn()),
                logits: dummy_logits,
                predicted: 0,
            };
            let e = tape.leaf(arr1(emb).into_dyn());
            tape.value(semantic_fuse(&tape, e, &cat).unwrap())
        };

        assert_eq!(
            fuse_with(&[1.0, 1.0, 1.0], &[0.4, -2.0, 7.0]).as_slice().unwrap(),
            &[0.4, -2.0, 7.0]
        );
        assert_eq!(
            fuse_with(&[0.0, 0.0], &[3.0, -1.0]).as_slice().unwrap(),
            &[0.0, 0.0]
        );
        assert_eq!(
            fuse_with(&[2.0, 0.5, -1.0], &[1.0, 2.0, 3.0]).as_slice().unwrap(),
            &[2.0, 1.0, -3.0]
        );
    }

    #[test]
    fn semantic_fuse_is_commutative_and_bilinear() {
        let tape = Tape::inference();
        let x = arr1(&[0.5, -1.5, 2.0]);
        let y = arr1(&[1.1, 0.3, -0.7]);
        let cat = |v: &ndarray::Array1<f64>| CategoryPrediction {
            feature: tape.leaf(v.clone().into_dyn()),
            logits: tape.leaf(arr1(&[0.0]).into_dyn()),
            predicted: 0,
        };
        let xy = tape.value(
            semantic_fuse(&tape, tape.leaf(x.clone().into_dyn()), &cat(&y)).unwrap(),
        );
        let yx = tape.value(
            semantic_fuse(&tape, tape.leaf(y.clone().into_dyn()), &cat(&x)).unwrap(),
        );
        assert_eq!(xy, yx);

        let scaled = tape.value(
            semantic_fuse(&tape, tape.leaf((&x * 3.0).into_dyn()), &cat(&y)).unwrap(),
        );
        for (s, v) in scaled.iter().zip(xy.iter()) {
            assert!((s - 3.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_fuse_rejects_dimension_mismatch() {
        let tape = Tape::inference();
        let cat = CategoryPrediction {
            feature: tape.leaf(arr1(&[1.0, 2.0]).into_dyn()),
            logits: tape.leaf(arr1(&[0.0]).into_dyn()),
            predicted: 0,
        };
        let emb = tape.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        assert!(matches!(
            semantic_fuse(&tape, emb, &cat).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn classification_loss_hand_values() {
        let tape = Tape::inference();

        let uniform = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[8])));
        let loss = classification_loss(&tape, uniform, 3).unwrap();
        assert!((tape.scalar(loss) - (8.0f64).ln()).abs() < 1e-12);

        let mut saturated = ndarray::ArrayD::zeros(ndarray::IxDyn(&[4]));
        saturated[[1]] = 1e6;
        let loss = classification_loss(&tape, tape.leaf(saturated), 1).unwrap();
        assert!(tape.scalar(loss) < 1e-6);

        let two = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let loss = classification_loss(&tape, two, 0).unwrap();
        assert!((tape.scalar(loss) - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);

        let err = classification_loss(&tape, two, 2).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { got: 2, num_classes: 2 }));
    }

    #[test]
    fn classification_loss_is_shift_invariant_and_non_negative() {
        let tape = Tape::inference();
        let mut r = rng(3);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| r.random_range(-4.0..4.0)).collect();
            let label = r.random_range(0..5);
            let l0 = classification_loss(&tape, tape.leaf(arr1(&logits).into_dyn()), label)
                .unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + 17.5).collect();
            let l1 = classification_loss(&tape, tape.leaf(arr1(&shifted).into_dyn()), label)
                .unwrap();
            let (a, b) = (tape.scalar(l0), tape.scalar(l1));
            assert!(a >= 0.0);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn classification_loss_gradients_match_finite_differences() {
        let logits0 = arr1(&[0.3, -1.2, 0.8, 2.0]);
        let label = 2;
        for form in [0, 1] {
            let eval = |x: &ndarray::Array1<f64>| {
                let t = Tape::inference();
                let leaf = t.leaf(x.clone().into_dyn());
                let loss = if form == 0 {
                    classification_loss(&t, leaf, label).unwrap()
                } else {
                    binary_classification_loss(&t, leaf, label).unwrap()
                };
                t.scalar(loss)
            };
            let tape = Tape::new();
            let leaf = tape.leaf(logits0.clone().into_dyn());
            let loss = if form == 0 {
                classification_loss(&tape, leaf, label).unwrap()
            } else {
                binary_classification_loss(&tape, leaf, label).unwrap()
            };
            let grads = tape.backward(loss);
            let analytic = grads.get(leaf).unwrap().clone();
            for k in 0..4 {
                let numeric = gradcheck::central_diff(
                    &mut |v| {
                        let mut x = logits0.clone();
                        x[k] = v;
                        eval(&x)
                    },
                    logits0[k],
                    gradcheck::DEFAULT_STEP,
                );
                let rel = gradcheck::relative_error(analytic[[k]], numeric);
                assert!(rel < 1e-4, "form {form} logit {k}: rel {rel}");
            }
        }
    }

    #[test]
    fn binary_form_differs_from_softmax_form() {
        let tape = Tape::inference();
        let logits = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let soft = classification_loss(&tape, logits, 0).unwrap();
        let binary = binary_classification_loss(&tape, logits, 0).unwrap();
        assert!((tape.scalar(soft) - tape.scalar(binary)).abs() > 1e-3);
    }
}
