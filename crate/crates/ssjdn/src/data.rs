//! Vocabulary, caption tokenization, dataset IO, and the deterministic
//! synthetic shape/caption corpus.
//!
//! The synthetic generator is the desk-scale stand-in for a remote-sensing
//! caption dataset: every image shows 1–3 instances of one shape category
//! drawn at one of three size bands over a noisy background, and carries
//! five templated captions naming the category, color, count, and relative
//! size. Categories are balanced exactly (`label = index % c`), and every
//! byte of output is a pure function of the seed.

use crate::{Error, Result};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Captions carried by every sample.
pub const CAPTIONS_PER_IMAGE: usize = 5;

/// Index of the padding token in every vocabulary.
pub const PAD: usize = 0;

/// Index of the unknown token in every vocabulary.
pub const UNK: usize = 1;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token table mapping words to dense indices, with reserved `pad`
/// and `unk` entries at indices 0 and 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.index_to_token
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(index_to_token: Vec<String>) -> Self {
        let token_to_index = index_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_index,
            index_to_token,
        }
    }
}

/// Lowercase, replace every non-alphanumeric character with a space, and
/// split on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Build a vocabulary from a caption corpus. Tokens occurring at least
/// `min_count` times receive indices from 2 upward, ordered by descending
/// frequency and then lexicographically, so the assignment is
/// deterministic.
pub fn build_vocabulary<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in captions {
        for token in tokenize(caption.as_ref()) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut index_to_token = vec!["<pad>".to_owned(), "<unk>".to_owned()];
    index_to_token.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocabulary::from(index_to_token))
}

impl Vocabulary {
    /// Total number of indices, special tokens included.
    pub fn size(&self) -> usize {
        self.index_to_token.len()
    }

    /// Index of a (already normalized) token, if known.
    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    /// Token at an index; panics when out of range.
    pub fn token(&self, index: usize) -> &str {
        &self.index_to_token[index]
    }

    /// Encode a caption as exactly `max_len` indices: unknown tokens map
    /// to [`UNK`], short captions are right-padded with [`PAD`], long ones
    /// truncated. Also returns the number of meaningful positions.
    pub fn encode_caption(&self, caption: &str, max_len: usize) -> (Vec<usize>, usize) {
        assert!(max_len >= 1, "encode_caption: max_len must be positive");
        let tokens = tokenize(caption);
        let length = tokens.len().min(max_len);
        let mut ids = vec![PAD; max_len];
        for (slot, token) in ids.iter_mut().zip(tokens.iter()) {
            *slot = self.token_index(token).unwrap_or(UNK);
        }
        (ids, length)
    }
}

// ---------------------------------------------------------------------------
// Samples and datasets
// ---------------------------------------------------------------------------

/// One image with its five captions and category label. The image is
/// stored as an `(H, W, 3)` array of values in `[0, 1]`, quantized to
/// 8-bit levels so PNG round-trips are lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub captions: Vec<String>,
    pub category: usize,
}

/// An in-memory dataset: samples plus the category count `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_categories: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every caption in sample order — the vocabulary-building corpus.
    pub fn all_captions(&self) -> impl Iterator<Item = &str> {
        self.samples
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str))
    }

    /// Check the five-caption, category-range and unique-id invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for sample in &self.samples {
            if sample.captions.len() != CAPTIONS_PER_IMAGE {
                return Err(Error::CaptionCount {
                    id: sample.id.clone(),
                    got: sample.captions.len(),
                    expected: CAPTIONS_PER_IMAGE,
                });
            }
            if sample.category >= self.num_categories {
                return Err(Error::CategoryOutOfRange {
                    id: sample.id.clone(),
                    got: sample.category,
                    num_categories: self.num_categories,
                });
            }
            if !seen.insert(sample.id.as_str()) {
                return Err(Error::DuplicateSampleId(sample.id.clone()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub num_images: usize,
    /// Side length of the square images; must be ≥ 32.
    pub image_size: usize,
    pub num_categories: usize,
    /// Inclusive range of shape instances per image.
    pub shapes_per_image: (usize, usize),
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(num_images: usize, image_size: usize, num_categories: usize, seed: u64) -> Self {
        GeneratorSpec {
            num_images,
            image_size,
            num_categories,
            shapes_per_image: (1, 3),
            seed,
        }
    }
}

/// The shape templates, one per category, in category order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Bar,
    Elbow,
    DotCluster,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::Elbow,
        ShapeKind::DotCluster,
    ];

    /// Caption noun, singular and plural.
    fn noun(self, plural: bool) -> &'static str {
        match (self, plural) {
            (ShapeKind::Square, false) => "square",
            (ShapeKind::Square, true) => "squares",
            (ShapeKind::Circle, false) => "circle",
            (ShapeKind::Circle, true) => "circles",
            (ShapeKind::Triangle, false) => "triangle",
            (ShapeKind::Triangle, true) => "triangles",
            (ShapeKind::Cross, false) => "cross",
            (ShapeKind::Cross, true) => "crosses",
            (ShapeKind::Ring, false) => "ring",
            (ShapeKind::Ring, true) => "rings",
            (ShapeKind::Bar, false) => "bar",
            (ShapeKind::Bar, true) => "bars",
            (ShapeKind::Elbow, false) => "elbow",
            (ShapeKind::Elbow, true) => "elbows",
            (ShapeKind::DotCluster, false) => "dot cluster",
            (ShapeKind::DotCluster, true) => "dot clusters",
        }
    }

    /// Template name used in error listings.
    pub fn template_name(self) -> &'static str {
        self.noun(false)
    }

    /// Membership test in shape-local coordinates: `dx`, `dy` relative to
    /// the center, `half` the half-extent of the bounding box.
    fn contains(self, dx: f64, dy: f64, half: f64) -> bool {
        let within_box = dx.abs() <= half && dy.abs() <= half;
        match self {
            ShapeKind::Square => within_box,
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Triangle => within_box && dx.abs() <= (dy + half) / 2.0,
            ShapeKind::Cross => {
                within_box && (dx.abs() <= half / 3.0 || dy.abs() <= half / 3.0)
            }
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                let inner = 0.6 * half;
                r2 <= half * half && r2 >= inner * inner
            }
            ShapeKind::Bar => dx.abs() <= half && dy.abs() <= half / 3.0,
            ShapeKind::Elbow => {
                within_box && (dx <= -half / 3.0 || dy >= half / 3.0)
            }
            ShapeKind::DotCluster => {
                let dot_r = half / 4.0;
                let off = half / 2.0;
                [(-off, -off), (off, -off), (-off, off), (off, off)]
                    .iter()
                    .any(|&(ox, oy)| {
                        let (rx, ry) = (dx - ox, dy - oy);
                        rx * rx + ry * ry <= dot_r * dot_r
                    })
            }
        }
    }
}

/// The three nominal size bands, as fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];

    fn fraction(self) -> f64 {
        match self {
            SizeBand::Small => 0.10,
            SizeBand::Medium => 0.25,
            SizeBand::Large => 0.50,
        }
    }

    fn word(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        }
    }
}

const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 45, 45]),
    ("green", [45, 200, 70]),
    ("blue", [60, 95, 230]),
    ("yellow", [230, 210, 55]),
    ("purple", [160, 60, 205]),
    ("orange", [240, 140, 40]),
    ("cyan", [60, 210, 210]),
    ("white", [240, 240, 240]),
];

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

/// Mix a global seed with a stream index into an independent sub-seed
/// (splitmix64 finalizer, applied twice for avalanche).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

/// Generate the synthetic dataset. Pure in `spec.seed`: identical specs
/// produce identical datasets down to each pixel byte.
pub fn generate_synthetic_dataset(spec: &GeneratorSpec) -> Result<Dataset> {
    if spec.image_size < 32 {
        return Err(Error::ImageTooSmall {
            got: spec.image_size,
            min: 32,
        });
    }
    if spec.num_categories == 0 || spec.num_categories > ShapeKind::ALL.len() {
        return Err(Error::TooManyCategories {
            requested: spec.num_categories,
            available: ShapeKind::ALL
                .iter()
                .map(|s| s.template_name().to_owned())
                .collect(),
        });
    }
    let (lo, hi) = spec.shapes_per_image;
    assert!(
        (1..=3).contains(&lo) && lo <= hi && hi <= 3,
        "shapes_per_image must lie within 1..=3"
    );

    let samples = (0..spec.num_images)
        .map(|i| {
            let category = i % spec.num_categories;
            let shape = ShapeKind::ALL[category];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            render_sample(&mut rng, spec, i, shape, category)
        })
        .collect();

    let ds = Dataset {
        samples,
        num_categories: spec.num_categories,
    };
    ds.validate()?;
    Ok(ds)
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    spec: &GeneratorSpec,
    index: usize,
    shape: ShapeKind,
    category: usize,
) -> Sample {
    let h = spec.image_size;
    let (color_name, color) = COLORS[rng.random_range(0..COLORS.len())];
    let band = SizeBand::ALL[rng.random_range(0..SizeBand::ALL.len())];
    let (lo, hi) = spec.shapes_per_image;
    let count = rng.random_range(lo..=hi);

    let mut pixels = vec![0u8; h * h * 3];
    // Background: dark gray with mild luminance noise plus a touch of
    // per-channel jitter, so the backbone sees texture rather than flats.
    for y in 0..h {
        for x in 0..h {
            let base = 28 + rng.random_range(0..26) as u8;
            for ch in 0..3 {
                let jitter = rng.random_range(0..8) as u8;
                pixels[(y * h + x) * 3 + ch] = base.saturating_add(jitter);
            }
        }
    }
    // Low-contrast distractor patches, never the category shape's color.
    for _ in 0..rng.random_range(2..=4) {
        let pw = rng.random_range(3..=h / 4);
        let ph = rng.random_range(3..=h / 4);
        let x0 = rng.random_range(0..h - pw);
        let y0 = rng.random_range(0..h - ph);
        let delta: i16 = rng.random_range(-18..=18);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                for ch in 0..3 {
                    let p = &mut pixels[(y * h + x) * 3 + ch];
                    *p = (*p as i16 + delta).clamp(0, 255) as u8;
                }
            }
        }
    }
    // Shape instances: one color and size band per image (jittered per
    // instance) so the captions stay unambiguous.
    for _ in 0..count {
        let size = band.fraction() * h as f64 * rng.random_range(0.85..1.15);
        let half = (size / 2.0).max(2.0);
        let margin = half.ceil() as usize + 1;
        let cx = rng.random_range(margin..h - margin) as f64;
        let cy = rng.random_range(margin..h - margin) as f64;
        let (y0, y1) = ((cy - half).floor() as usize, (cy + half).ceil() as usize);
        let (x0, x1) = ((cx - half).floor() as usize, (cx + half).ceil() as usize);
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(h - 1) {
                if shape.contains(x as f64 - cx, y as f64 - cy, half) {
                    for ch in 0..3 {
                        pixels[(y * h + x) * 3 + ch] = color[ch];
                    }
                }
            }
        }
    }

    let image = Array3::from_shape_fn((h, h, 3), |(y, x, ch)| {
        pixels[(y * h + x) * 3 + ch] as f64 / 255.0
    });

    Sample {
        id: format!("img{index:05}"),
        image,
        captions: captions_for(shape, color_name, count, band),
        category,
    }
}

fn captions_for(shape: ShapeKind, color: &str, count: usize, band: SizeBand) -> Vec<String> {
    let noun = shape.noun(count > 1);
    let count_word = COUNT_WORDS[count - 1];
    let size = band.word();
    let verb = if count > 1 { "are" } else { "is" };
    vec![
        format!("a photo of {count_word} {size} {color} {noun}"),
        format!("there {verb} {count_word} {color} {noun} of {size} size"),
        format!("{count_word} {size} {noun} drawn in {color}"),
        format!("the image shows {count_word} {color} {noun} on a noisy background"),
        format!("{size} {color} {noun} on a gray textured field"),
    ]
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnnotationsFile {
    num_categories: usize,
    samples: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    image: String,
    captions: Vec<String>,
    category: usize,
}

/// Write a dataset as `annotations.json` plus 8-bit RGB PNGs under
/// `images/`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let file = format!("{}.png", sample.id);
        let (h, w, _) = sample.image.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = buf.get_pixel_mut(x as u32, y as u32);
                for ch in 0..3 {
                    px.0[ch] = (sample.image[(y, x, ch)] * 255.0).round() as u8;
                }
            }
        }
        buf.save(images_dir.join(&file))?;
        records.push(AnnotationRecord {
            id: sample.id.clone(),
            image: format!("images/{file}"),
            captions: sample.captions.clone(),
            category: sample.category,
        });
    }
    let file = std::fs::File::create(dir.join("annotations.json"))?;
    serde_json::to_writer_pretty(
        BufWriter::new(file),
        &AnnotationsFile {
            num_categories: dataset.num_categories,
            samples: records,
        },
    )?;
    Ok(())
}

/// Load a dataset directory written in the `annotations.json` + `images/`
/// layout, validating the caption and category invariants.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(dir.join("annotations.json"))?;
    let parsed: AnnotationsFile = serde_json::from_reader(std::io::BufReader::new(file))?;
    let mut samples = Vec::with_capacity(parsed.samples.len());
    for record in parsed.samples {
        let path: PathBuf = dir.join(&record.image);
        let bytes = std::fs::read(&path).map_err(|source| Error::MissingImage {
            id: record.id.clone(),
            path: path.clone(),
            source,
        })?;
        let decoded = image::load_from_memory(&bytes)?.into_rgb8();
        let (w, h) = decoded.dimensions();
        let image = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, ch)| {
            decoded.get_pixel(x as u32, y as u32).0[ch] as f64 / 255.0
        });
        samples.push(Sample {
            id: record.id,
            image,
            captions: record.captions,
            category: record.category,
        });
    }
    let ds = Dataset {
        samples,
        num_categories: parsed.num_categories,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_orders_by_frequency_then_lexicographically() {
        let vocab = build_vocabulary(&["a red square", "a red circle"], 1).unwrap();
        // Six entries: pad, unk, then "a" and "red" (frequency 2), then the
        // frequency-1 tokens in lexicographic order: "circle" before
        // "square".
        assert_eq!(vocab.size(), 6);
        assert_eq!(vocab.token_index("a"), Some(2));
        assert_eq!(vocab.token_index("red"), Some(3));
        assert_eq!(vocab.token_index("circle"), Some(4));
        assert_eq!(vocab.token_index("square"), Some(5));
    }

    #[test]
    fn vocabulary_threshold_and_empty_corpus() {
        let vocab = build_vocabulary(&["x"], 2).unwrap();
        assert_eq!(vocab.size(), 2); // pad + unk only
        let err = build_vocabulary::<&str>(&[], 1).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn vocabulary_is_deterministic_and_round_trips() {
        let corpus = ["b a a", "c b a", "d"];
        let v1 = build_vocabulary(&corpus, 1).unwrap();
        let v2 = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(v1, v2);
        for i in 2..v1.size() {
            let t = v1.token(i).to_owned();
            assert_eq!(v1.token_index(&t), Some(i));
        }
        // Serde round-trip preserves the table exactly.
        let json = serde_json::to_string(&v1).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v1, back);
    }

    #[test]
    fn encode_caption_pads_truncates_and_maps_oov() {
        let vocab = build_vocabulary(&["a red square", "a red circle"], 1).unwrap();
        let (ids, len) = vocab.encode_caption("a red square", 5);
        assert_eq!(ids, vec![2, 3, 5, 0, 0]);
        assert_eq!(len, 3);

        let (ids, len) = vocab.encode_caption("", 3);
        assert_eq!(ids, vec![0, 0, 0]);
        assert_eq!(len, 0);

        let (ids, len) = vocab.encode_caption("a zebra", 4);
        assert_eq!(ids, vec![2, UNK, 0, 0]);
        assert_eq!(len, 2);

        let (ids, len) = vocab.encode_caption("a red square a red circle", 3);
        assert_eq!(ids, vec![2, 3, 5]);
        assert_eq!(len, 3);
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("A Red, square!"), vec!["a", "red", "square"]);
        assert_eq!(tokenize("dot-cluster"), vec!["dot", "cluster"]);
        assert!(tokenize("  ").is_empty());
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = GeneratorSpec::new(6, 32, 3, 7);
        let a = generate_synthetic_dataset(&spec).unwrap();
        let b = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&GeneratorSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_rejects_tiny_images_and_too_many_categories() {
        let err = generate_synthetic_dataset(&GeneratorSpec::new(1, 31, 2, 0)).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { got: 31, min: 32 }));

        let err = generate_synthetic_dataset(&GeneratorSpec::new(1, 32, 9, 0)).unwrap_err();
        match err {
            Error::TooManyCategories { requested, available } => {
                assert_eq!(requested, 9);
                assert_eq!(available.len(), 8);
                assert!(available.contains(&"square".to_owned()));
                assert!(available.contains(&"dot cluster".to_owned()));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn generated_samples_have_balanced_labels_and_five_captions() {
        let spec = GeneratorSpec::new(80, 32, 8, 3);
        let ds = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 80);
        let mut hist = vec![0usize; 8];
        for s in &ds.samples {
            assert_eq!(s.captions.len(), CAPTIONS_PER_IMAGE);
            hist[s.category] += 1;
            // Each caption mentions the category noun.
            let noun = ShapeKind::ALL[s.category].noun(false);
            let stem = noun.split(' ').next().unwrap();
            for c in &s.captions {
                assert!(c.contains(stem), "caption {c:?} misses noun {noun:?}");
            }
        }
        assert!(hist.iter().all(|&n| n == 10), "unbalanced: {hist:?}");
    }

    #[test]
    fn generated_pixels_are_quantized_and_in_range() {
        let ds = generate_synthetic_dataset(&GeneratorSpec::new(2, 32, 2, 1)).unwrap();
        for s in &ds.samples {
            for &v in s.image.iter() {
                assert!((0.0..=1.0).contains(&v));
                let q = (v * 255.0).round() / 255.0;
                assert_eq!(v, q, "pixel value {v} is not an 8-bit level");
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&GeneratorSpec::new(4, 32, 4, 11)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn save_twice_produces_identical_bytes() {
        let ds = generate_synthetic_dataset(&GeneratorSpec::new(3, 32, 3, 5)).unwrap();
        let read_all = |dir: &Path| {
            let mut blobs = vec![std::fs::read(dir.join("annotations.json")).unwrap()];
            for s in &ds.samples {
                blobs.push(std::fs::read(dir.join(format!("images/{}.png", s.id))).unwrap());
            }
            blobs
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_dataset(&ds, d1.path()).unwrap();
        save_dataset(&ds, d2.path()).unwrap();
        assert_eq!(read_all(d1.path()), read_all(d2.path()));
    }

    #[test]
    fn load_rejects_wrong_caption_count_naming_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_synthetic_dataset(&GeneratorSpec::new(2, 32, 2, 2)).unwrap();
        ds.samples[1].captions.pop();
        // Bypass save-side validation by writing the annotation file directly.
        let images_dir = dir.path().join("images");
        std::fs::create_dir_all(&images_dir).unwrap();
        let records: Vec<AnnotationRecord> = ds
            .samples
            .iter()
            .map(|s| AnnotationRecord {
                id: s.id.clone(),
                image: format!("images/{}.png", s.id),
                captions: s.captions.clone(),
                category: s.category,
            })
            .collect();
        for s in &ds.samples {
            image::RgbImage::new(32, 32)
                .save(images_dir.join(format!("{}.png", s.id)))
                .unwrap();
        }
        std::fs::write(
            dir.path().join("annotations.json"),
            serde_json::to_string(&AnnotationsFile {
                num_categories: 2,
                samples: records,
            })
            .unwrap(),
        )
        .unwrap();

        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img00001") && msg.contains("4"), "message: {msg}");
    }

    #[test]
    fn load_reports_missing_images_and_bad_categories() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&GeneratorSpec::new(2, 32, 2, 9)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("images/img00000.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("img00000"));

        // Category out of range, detected with the sample id in the message.
        let dir2 = tempfile::tempdir().unwrap();
        let mut bad = ds.clone();
        bad.samples[1].category = 5;
        bad.num_categories = 2;
        let res = save_dataset(&bad, dir2.path());
        assert!(res.unwrap_err().to_string().contains("img00001"));
    }

    #[test]
    fn derive_seed_separates_streams() {
        let s0 = derive_seed(7, 0);
        let s1 = derive_seed(7, 1);
        let t0 = derive_seed(8, 0);
        assert_ne!(s0, s1);
        assert_ne!(s0, t0);
        assert_eq!(s0, derive_seed(7, 0));
    }
}
