//! Deterministic stand-in clients.
//!
//! These implement the scorer / feature-extractor / classifier / LLM client
//! traits with pure functions of their inputs, so the full toolchain —
//! dataset construction, evaluation, reports — runs reproducibly with no
//! external services. Scores react smoothly to image content (through
//! coarse luminance statistics) and to text (through seeded hashing), which
//! keeps rankings and distributional metrics non-degenerate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::LlmClient;
use crate::image::RgbImage;
use crate::metrics::{
    ClientError, FeatureBatch, FeatureExtractor, ProbBatch, ProbClassifier, ScorerClient,
};
use crate::rng::{derive_seed, fnv1a, seeded_rng};

/// Grid side of the coarse luminance statistics.
const STAT_GRID: usize = 4;
/// Length of the statistics vector.
pub const STAT_DIM: usize = STAT_GRID * STAT_GRID;

/// Coarse content statistics: mean luminance over a 4x4 grid of blocks.
/// Sensitive to both content and geometry, smooth under small perturbations.
#[must_use]
pub fn image_stats(image: &RgbImage) -> [f64; STAT_DIM] {
    let mut stats = [0.0; STAT_DIM];
    let (h, w) = (image.height(), image.width());
    for gy in 0..STAT_GRID {
        for gx in 0..STAT_GRID {
            let y0 = gy * h / STAT_GRID;
            let y1 = ((gy + 1) * h / STAT_GRID).max(y0 + 1).min(h);
            let x0 = gx * w / STAT_GRID;
            let x1 = ((gx + 1) * w / STAT_GRID).max(x0 + 1).min(w);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..RgbImage::CHANNELS {
                        sum += image.get(y, x, c);
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0) * RgbImage::CHANNELS) as f64;
            stats[gy * STAT_GRID + gx] = sum / count;
        }
    }
    stats
}

/// Deterministic image/text agreement scorer: the text seeds a target
/// statistics vector and the score decays with the distance between the
/// image's statistics and that target.
#[derive(Debug, Clone, Default)]
pub struct MockScorer;

impl MockScorer {
    #[must_use]
    pub fn new() -> Self {
        Self
    }
}

impl ScorerClient for MockScorer {
    fn id(&self) -> &str {
        "mock-scorer"
    }

    fn score(&mut self, image: &RgbImage, text: &str) -> Result<f64, ClientError> {
        let stats = image_stats(image);
        let mut rng = seeded_rng(derive_seed(fnv1a(text.as_bytes()), "mock-scorer-target"));
        let mut d2 = 0.0;
        for &s in &stats {
            let target: f64 = rng.gen_range(0.0..1.0);
            d2 += (s - target) * (s - target);
        }
        Ok(Float::exp(-4.0 * d2 / STAT_DIM as f64))
    }
}

/// Deterministic feature extractor: a fixed seeded projection of the image
/// statistics.
#[derive(Debug, Clone)]
pub struct MockExtractor {
    id: String,
    dim: usize,
    projection: Vec<f64>,
}

impl MockExtractor {
    /// An extractor producing `dim`-dimensional features.
    #[must_use]
    pub fn new(dim: usize) -> Self {
        let id = format!("mock-extractor-d{dim}");
        let mut rng = seeded_rng(derive_seed(fnv1a(id.as_bytes()), "mock-extractor-proj"));
        let normal = Normal::new(0.0, 1.0 / (STAT_DIM as f64).sqrt()).expect("valid normal");
        let projection = (0..dim * STAT_DIM).map(|_| normal.sample(&mut rng)).collect();
        Self { id, dim, projection }
    }
}

impl Default for MockExtractor {
    fn default() -> Self {
        Self::new(4)
    }
}

impl FeatureExtractor for MockExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&mut self, images: &[RgbImage]) -> Result<FeatureBatch, ClientError> {
        let mut data = Vec::with_capacity(images.len() * self.dim);
        for image in images {
            let stats = image_stats(image);
            for o in 0..self.dim {
                let mut acc = 0.0;
                for (i, &s) in stats.iter().enumerate() {
                    acc += self.projection[o * STAT_DIM + i] * s;
                }
                data.push(acc);
            }
        }
        FeatureBatch::new(self.id.clone(), self.dim, data)
            .map_err(|e| ClientError::Failure(format!("{e}")))
    }
}

/// Deterministic class-probability model: softmax over a fixed seeded
/// projection of the image statistics.
#[derive(Debug, Clone)]
pub struct MockClassifier {
    id: String,
    classes: usize,
    projection: Vec<f64>,
}

impl MockClassifier {
    /// A classifier over `classes` classes.
    #[must_use]
    pub fn new(classes: usize) -> Self {
        let id = format!("mock-classifier-k{classes}");
        let mut rng = seeded_rng(derive_seed(fnv1a(id.as_bytes()), "mock-classifier-proj"));
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let projection = (0..classes * STAT_DIM)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            id,
            classes,
            projection,
        }
    }
}

impl Default for MockClassifier {
    fn default() -> Self {
        Self::new(10)
    }
}

impl ProbClassifier for MockClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn probs(&mut self, images: &[RgbImage]) -> Result<ProbBatch, ClientError> {
        let mut data = Vec::with_capacity(images.len() * self.classes);
        for image in images {
            let stats = image_stats(image);
            let mut logits = Vec::with_capacity(self.classes);
            for k in 0..self.classes {
                let mut acc = 0.0;
                for (i, &s) in stats.iter().enumerate() {
                    acc += self.projection[k * STAT_DIM + i] * s;
                }
                logits.push(3.0 * acc);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in &mut logits {
                *l = Float::exp(*l - max);
                sum += *l;
            }
            for l in &logits {
                data.push(l / sum);
            }
        }
        ProbBatch::new(self.classes, data).map_err(|e| ClientError::Failure(format!("{e}")))
    }
}

/// Scene templates the mock LLM appends to the caption it is asked to vary.
const MOCK_SCENES: [&str; 5] = [
    "at dawn",
    "in heavy rain",
    "under warm evening light",
    "in a snowy field",
    "beside a calm river",
];

/// Deterministic LLM: extracts the sentence between the query's angle
/// brackets and answers with five numbered scene variations of it.
#[derive(Debug, Clone, Default)]
pub struct MockLlm;

impl MockLlm {
    #[must_use]
    pub fn new() -> Self {
        Self
    }
}

impl LlmClient for MockLlm {
    fn id(&self) -> &str {
        "mock-llm"
    }

    fn complete(&mut self, query: &str) -> Result<String, ClientError> {
        let start = query
            .find('<')
            .ok_or_else(|| ClientError::Failure("query has no <sentence>".into()))?;
        let end = query
            .rfind('>')
            .filter(|&e| e > start)
            .ok_or_else(|| ClientError::Failure("query has no closing >".into()))?;
        let sentence = query[start + 1..end].trim();
        let mut out = String::new();
        for (i, scene) in MOCK_SCENES.iter().enumerate() {
            out.push_str(&format!("{}. {sentence} {scene}\n", i + 1));
        }
        Ok(out)
    }
}

/// An LLM that replays a fixed list of canned responses, then fails.
/// Useful for exercising parse-retry behaviour and for offline transcripts.
#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    responses: Vec<String>,
    cursor: usize,
}

impl ScriptedLlm {
    #[must_use]
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            cursor: 0,
        }
    }

    /// Number of responses consumed so far.
    #[must_use]
    pub fn consumed(&self) -> usize {
        self.cursor
    }
}

impl LlmClient for ScriptedLlm {
    fn id(&self) -> &str {
        "scripted-llm"
    }

    fn complete(&mut self, _query: &str) -> Result<String, ClientError> {
        let response = self
            .responses
            .get(self.cursor)
            .ok_or_else(|| ClientError::Unavailable("scripted responses exhausted".into()))?;
        self.cursor += 1;
        Ok(response.clone())
    }
}
