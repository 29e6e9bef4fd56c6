//! Checkpoints: every parameter tensor by module path, the config that
//! produced them, and the per-epoch metric history, in one JSON file.
//!
//! Serialization must be lossless: a reloaded checkpoint drives forward
//! passes that are bit-identical to the pre-save model. JSON numbers are
//! written in shortest-round-trip form, which preserves every finite
//! `f64` exactly.

use super::config::Config;
use crate::data::Vocabulary;
use crate::nn::Params;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Which training phase produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Phase 1: the two category classifiers.
    Classifiers,
    /// Phase 2: the full retrieval model (with the frozen classifiers
    /// embedded).
    Retrieval,
}

/// One epoch's logged metrics. Keys are metric names (`train_loss`,
/// `image_accuracy`, ...); the map ordering is stable so logs from equal
/// runs compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// One named tensor in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A complete snapshot of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: Config,
    pub config_fingerprint: String,
    /// Token table the text towers were trained with; reused verbatim for
    /// any later encoding.
    pub vocabulary: Vocabulary,
    pub num_categories: usize,
    /// Completed epochs at save time.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    params: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub(crate) fn from_params(
        kind: CheckpointKind,
        config: &Config,
        vocabulary: &Vocabulary,
        num_categories: usize,
        epoch: usize,
        history: Vec<EpochMetrics>,
        params: &Params,
    ) -> Self {
        Checkpoint {
            kind,
            config: config.clone(),
            config_fingerprint: config.fingerprint(),
            vocabulary: vocabulary.clone(),
            num_categories,
            epoch,
            history,
            params: params
                .iter()
                .map(|(name, value)| {
                    (
                        name.to_owned(),
                        TensorData {
                            shape: value.shape().to_vec(),
                            data: value.iter().copied().collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Rebuild the parameter store, preserving tensor order.
    pub(crate) fn to_params(&self) -> Params {
        let mut params = Params::new();
        for (name, tensor) in &self.params {
            let value = ArrayD::from_shape_vec(IxDyn(&tensor.shape), tensor.data.clone())
                .expect("checkpoint tensor shape matches its data");
            params.add(name.clone(), value);
        }
        params
    }

    /// Look up one stored tensor as `(shape, row-major data)`.
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (t.shape.as_slice(), t.data.as_slice()))
    }

    /// Names of every stored tensor, in storage order.
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Error unless this checkpoint came from the expected phase.
    pub fn require_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::fs::File::create(path)?;
        let writer = std::io::BufWriter::new(file);
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let checkpoint: Checkpoint = serde_json::from_reader(reader)?;
        for (name, tensor) in &checkpoint.params {
            let expected: usize = tensor.shape.iter().product();
            if tensor.data.len() != expected {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name:?} holds {} values but its shape {:?} needs {expected}",
                    tensor.data.len(),
                    tensor.shape
                )));
            }
        }
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocabulary;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        params.add(
            "ret.image.proj.weight",
            ArrayD::from_shape_fn(IxDyn(&[4, 3]), |_| rng.random_range(-1.0..1.0)),
        );
        params.add(
            "ret.image.proj.bias",
            ArrayD::from_shape_fn(IxDyn(&[4]), |_| {
                // Exercise awkward magnitudes: round-tripping must keep
                // every bit.
                rng.random_range(-1.0..1.0) * 1e-17
            }),
        );
        let vocab = build_vocabulary(&["a red square", "two blue circles"], 1).unwrap();
        let history = vec![EpochMetrics {
            epoch: 1,
            metrics: BTreeMap::from([("train_loss".to_owned(), 0.25)]),
        }];
        Checkpoint::from_params(
            CheckpointKind::Retrieval,
            &Config::default(),
            &vocab,
            8,
            1,
            history,
            &params,
        )
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let checkpoint = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, checkpoint);

        let params = checkpoint.to_params();
        let reloaded = back.to_params();
        for ((n1, v1), (n2, v2)) in params.iter().zip(reloaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "tensor {n1} drifted through serialization");
        }
    }

    /// JSON float parsing must return exactly the stored f64, not a
    /// nearest-neighbor approximation: a single-ULP miss in one weight
    /// desynchronizes training continuations from in-memory runs.
    #[test]
    fn float_serialization_survives_adversarial_mantissas() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data: Vec<f64> = (0..20_000)
            .map(|_| {
                let mantissa: f64 = rng.random_range(-1.0..1.0);
                let exponent: i32 = rng.random_range(-300..300);
                mantissa * 10f64.powi(exponent)
            })
            .collect();
        // A value observed to lose its last mantissa bit under
        // best-effort float parsing.
        data.push(-2.2461613811651318e-1);
        let shape = vec![data.len()];

        let mut params = Params::new();
        params.add(
            "probe.w",
            ArrayD::from_shape_vec(IxDyn(&shape), data.clone()).unwrap(),
        );
        let vocab = build_vocabulary(&["a red square"], 1).unwrap();
        let checkpoint = Checkpoint::from_params(
            CheckpointKind::Retrieval,
            &Config::default(),
            &vocab,
            2,
            0,
            Vec::new(),
            &params,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let (_, reloaded) = back.tensor("probe.w").unwrap();
        for (i, (a, b)) in data.iter().zip(reloaded).enumerate() {
            assert_eq!(a.to_bits(), b.to_bits(), "element {i}: {a:e} vs {b:e}");
        }
    }

    #[test]
    fn tensor_lookup_and_kind_gate() {
        let checkpoint = sample_checkpoint();
        let (shape, data) = checkpoint.tensor("ret.image.proj.weight").unwrap();
        assert_eq!(shape, &[4, 3]);
        assert_eq!(data.len(), 12);
        assert!(checkpoint.tensor("missing").is_none());
        assert_eq!(checkpoint.tensor_names().count(), 2);

        checkpoint.require_kind(CheckpointKind::Retrieval).unwrap();
        let err = checkpoint
            .require_kind(CheckpointKind::Classifiers)
            .unwrap_err();
        assert!(matches!(err, Error::IncompatibleCheckpoint(_)));
    }

    #[test]
    fn load_rejects_inconsistent_tensor_sizes() {
        let checkpoint = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        checkpoint.save(&path).unwrap();
        let mangled = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"shape\":[4,3]", "\"shape\":[5,3]", 1);
        std::fs::write(&path, mangled).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::IncompatibleCheckpoint(_)), "{err}");
    }
}
