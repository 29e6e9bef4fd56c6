//! Component-ablation runner: trains and evaluates a list of model
//! variants under shared seeds and reports per-seed and median metrics.

use super::checkpoint::Checkpoint;
use super::config::{AttentionKind, Config, DirectionChoice, FusionMethod};
use super::eval::evaluate_cached;
use super::model::{ClassifierPair, SemanticCache};
use super::train::{train_classifiers, train_retrieval_cached};
use crate::data::Dataset;
use crate::retrieval::RetrievalReport;
use crate::{Error, Result};
use serde::Serialize;

/// One model variant of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// The complete model, exactly as configured.
    Full,
    /// Raw pyramid maps instead of scale decoupling.
    WithoutBsd,
    /// No classifier towers: neither category-feature fusion into the
    /// embeddings nor the category weighting in the loss.
    WithoutLsd,
    /// Plain ranking loss instead of the category-boosted one.
    WithoutStl,
    /// All three of the above at once.
    WithoutAll,
    /// Decoupling restricted to the small-receptive-field-first pass.
    SingleDirectionSmallToLarge,
    /// Decoupling restricted to the large-receptive-field-first pass.
    SingleDirectionLargeToSmall,
    /// Per-scale attention without cross-scale suppression.
    AttentionOnly,
    /// No attention at all (alias of [`Variant::WithoutBsd`] wiring).
    WithoutAttention,
    /// Category features added instead of multiplied.
    FusionAdd,
    /// Category features concatenated instead of multiplied.
    FusionConcat,
    /// Same-category loss boost forced to the given value. Values below 1
    /// are permitted here (and only here) for sensitivity sweeps.
    ClassBoost(f64),
}

impl Variant {
    /// Parse the command-line token for a variant.
    pub fn parse(token: &str) -> Result<Self> {
        let variant = match token {
            "full" => Variant::Full,
            "w/o-bsd" => Variant::WithoutBsd,
            "w/o-lsd" => Variant::WithoutLsd,
            "w/o-stl" => Variant::WithoutStl,
            "w/o-all" => Variant::WithoutAll,
            "usd-s2l" => Variant::SingleDirectionSmallToLarge,
            "usd-l2s" => Variant::SingleDirectionLargeToSmall,
            "ma" => Variant::AttentionOnly,
            "w/o-ma" => Variant::WithoutAttention,
            "fusion-add" => Variant::FusionAdd,
            "fusion-concat" => Variant::FusionConcat,
            other => {
                if let Some(raw) = other.strip_prefix("boost-") {
                    let value: f64 = raw.parse().map_err(|_| {
                        Error::InvalidConfig(format!("cannot parse boost value in {other:?}"))
                    })?;
                    if !value.is_finite() || value <= 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "boost value {value} must be finite and positive"
                        )));
                    }
                    Variant::ClassBoost(value)
                } else {
                    return Err(Error::InvalidConfig(format!(
                        "unknown variant {other:?}; expected one of full, w/o-bsd, w/o-lsd, \
                         w/o-stl, w/o-all, usd-s2l, usd-l2s, ma, w/o-ma, fusion-add, \
                         fusion-concat, boost-<value>"
                    )));
                }
            }
        };
        Ok(variant)
    }

    /// The command-line token for this variant.
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".to_owned(),
            Variant::WithoutBsd => "w/o-bsd".to_owned(),
            Variant::WithoutLsd => "w/o-lsd".to_owned(),
            Variant::WithoutStl => "w/o-stl".to_owned(),
            Variant::WithoutAll => "w/o-all".to_owned(),
            Variant::SingleDirectionSmallToLarge => "usd-s2l".to_owned(),
            Variant::SingleDirectionLargeToSmall => "usd-l2s".to_owned(),
            Variant::AttentionOnly => "ma".to_owned(),
            Variant::WithoutAttention => "w/o-ma".to_owned(),
            Variant::FusionAdd => "fusion-add".to_owned(),
            Variant::FusionConcat => "fusion-concat".to_owned(),
            Variant::ClassBoost(value) => format!("boost-{value}"),
        }
    }

    /// Derive this variant's config from the full-model base config.
    pub fn apply(&self, base: &Config) -> Config {
        let mut config = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutBsd | Variant::WithoutAttention => {
                config.use_bsd = false;
                config.attention = AttentionKind::None;
            }
            Variant::WithoutLsd => {
                // Without the classifier towers there is no category
                // prediction to weight the loss with, so the semantic
                // weighting falls away too.
                config.use_lsd = false;
                config.use_stl = false;
            }
            Variant::WithoutStl => config.use_stl = false,
            Variant::WithoutAll => {
                config.use_bsd = false;
                config.attention = AttentionKind::None;
                config.use_lsd = false;
                config.use_stl = false;
            }
            Variant::SingleDirectionSmallToLarge => {
                config.direction = DirectionChoice::SmallToLarge;
            }
            Variant::SingleDirectionLargeToSmall => {
                config.direction = DirectionChoice::LargeToSmall;
            }
            Variant::AttentionOnly => {
                config.use_bsd = false;
                config.attention = AttentionKind::Ma;
            }
            Variant::FusionAdd => config.fusion = FusionMethod::Add,
            Variant::FusionConcat => config.fusion = FusionMethod::Concat,
            Variant::ClassBoost(value) => {
                config.class_boost = *value;
                config.permit_sub_unit_boost = *value < 1.0;
            }
        }
        config
    }
}

/// All reports one variant produced across the shared seeds.
#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: String,
    /// One report per seed, aligned with [`AblationTable::seeds`].
    pub reports: Vec<RetrievalReport>,
    pub median_mean_recall: f64,
}

/// The combined result grid of one ablation run.
#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantResult>,
}

impl AblationTable {
    /// Median mean recall of a variant, by its label.
    pub fn median_for(&self, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|row| row.variant == label)
            .map(|row| row.median_mean_recall)
    }

    /// Aligned text table: one row per variant, one mean-recall column
    /// per seed plus the median.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14} {:>10}", "variant", "median mR"));
        for seed in &self.seeds {
            out.push_str(&format!(" {:>10}", format!("seed {seed}")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>10.4}",
                row.variant, row.median_mean_recall
            ));
            for report in &row.reports {
                out.push_str(&format!(" {:>10.4}", report.mean_recall));
            }
            out.push('\n');
        }
        out
    }
}

/// Midpoint median; the even case averages the two central values.
pub(crate) fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Train and evaluate every variant under every seed.
///
/// For each seed the classifiers are trained once and shared by all
/// variants (they are frozen in phase 2, so any variant that needs them
/// sees identical towers). Evaluation covers the full dataset.
pub fn run_ablation(
    dataset: &Dataset,
    base: &Config,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    base.validate()?;
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no ablation variants requested".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("no ablation seeds requested".into()));
    }

    let mut reports: Vec<Vec<RetrievalReport>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let mut seed_config = base.clone();
        seed_config.seed = seed;
        log::info!("ablation seed {seed}: training classifiers");
        let classifiers = train_classifiers(dataset, &seed_config)?;
        let cache = {
            let pair = ClassifierPair::new(
                classifiers.vocabulary.size(),
                classifiers.config.embedding_dim,
                classifiers.num_categories,
            );
            SemanticCache::build(&pair, &classifiers.to_params(), dataset, &classifiers.vocabulary)?
        };
        for (slot, variant) in variants.iter().enumerate() {
            let config = variant.apply(&seed_config);
            log::info!("ablation seed {seed}: training variant {}", variant.label());
            let checkpoint: Checkpoint =
                train_retrieval_cached(dataset, &classifiers, &config, Some(&cache))?;
            let report = evaluate_cached(&checkpoint, dataset, Some(&cache))?;
            reports[slot].push(report);
        }
    }

    let rows = variants
        .iter()
        .zip(reports)
        .map(|(variant, reports)| {
            let recalls: Vec<f64> = reports.iter().map(|r| r.mean_recall).collect();
            VariantResult {
                variant: variant.label(),
                median_mean_recall: median(&recalls),
                reports,
            }
        })
        .collect();

    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}


#[cfg(test)]
mod cache_tests {
    use super::*;
    use crate::data::{derive_seed, generate_synthetic_dataset, GeneratorSpec};
    use crate::harness::model::RetrievalModel;
    use rand_chacha::rand_core::SeedableRng;

    /// The cache the runner shares across variants must be bit-identical
    /// to the one `train_retrieval` would build for itself; otherwise the
    /// two entry points would train different models from the same seed.
    #[test]
    fn shared_cache_matches_the_internally_built_one() {
        let ds = generate_synthetic_dataset(&GeneratorSpec::new(16, 32, 4, 7)).unwrap();
        let mut cfg = Config::default();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        let cls = train_classifiers(&ds, &cfg).unwrap();

        let pair = ClassifierPair::new(
            cls.vocabulary.size(),
            cls.config.embedding_dim,
            cls.num_categories,
        );
        let shared =
            SemanticCache::build(&pair, &cls.to_params(), &ds, &cls.vocabulary).unwrap();

        // What train_retrieval does: classifier params plus freshly
        // initialized retrieval parameters in one set.
        let mut params = cls.to_params();
        let model = RetrievalModel::new(&cfg, cls.vocabulary.size());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 21));
        model.init(&mut params, &mut rng);
        let internal = SemanticCache::build(&pair, &params, &ds, &cls.vocabulary).unwrap();

        assert_eq!(shared.image_category, internal.image_category);
        assert_eq!(shared.caption_category, internal.caption_category);
        for i in 0..ds.len() {
            assert_eq!(shared.image_feature[i], internal.image_feature[i], "image {i}");
        }
        for i in 0..ds.len() * crate::data::CAPTIONS_PER_IMAGE {
            assert_eq!(shared.caption_feature[i], internal.caption_feature[i], "caption {i}");
        }
    }
}
