//! Image-quality and edit-fidelity metrics.
//!
//! The attack's goal is to *break* editing, so metrics compare what the
//! editor produced from adversarial inputs against what it produces from
//! benign inputs: pixel fidelity (PSNR), structural fidelity (SSIM,
//! multi-scale SSIM), distributional fidelity (Fréchet feature distance),
//! sample diversity (inception-style score), and prompt fidelity (mean
//! image-text score). The embedding-model clients — scorer, feature
//! extractor, class-probability model — are injected through traits so runs
//! can use anything from deterministic mocks to external services.

mod fid;
mod ssim;

pub use fid::{
    fid, mean_and_covariance, sqrt_psd, symmetric_eigen, FID_NEGATIVE_TOLERANCE, FID_REGULARIZER,
};
pub use ssim::{
    gaussian_window, msssim, ssim, MSSSIM_WEIGHTS, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, RgbImage};

/// Maximum number of splits used by the inception-style score.
pub const IS_MAX_SPLITS: usize = 10;

/// Errors raised by clients (scorer / extractor / classifier back ends).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    /// The backing model or service cannot be reached or is not configured.
    #[error("client unavailable: {0}")]
    Unavailable(String),
    /// The client ran but failed.
    #[error("client failure: {0}")]
    Failure(String),
}

/// Errors from metric computation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Image(#[from] ImageError),
    /// Images are smaller than the metric's window.
    #[error("image {h}x{w} is below the {min}-pixel minimum side")]
    TooSmall { h: usize, w: usize, min: usize },
    /// Feature batches come from different extractors.
    #[error("feature batches from different extractors: {left} vs {right}")]
    ExtractorMismatch { left: String, right: String },
    /// Too few samples to fit a covariance.
    #[error("degenerate covariance ({samples} samples): {detail}")]
    DegenerateCovariance { samples: usize, detail: String },
    /// A probability row is not a distribution.
    #[error("degenerate probabilities at row {row}: {detail}")]
    DegenerateProbs { row: usize, detail: String },
    /// Paired inputs have different lengths.
    #[error("paired inputs of different lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    /// A metric was asked to aggregate over zero items.
    #[error("no items to evaluate")]
    Empty,
    /// A client backend failed.
    #[error(transparent)]
    Client(#[from] ClientError),
    /// Invalid metric parameter.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Scores image/text agreement in roughly `[-1, 1]`; higher is better.
pub trait ScorerClient {
    /// Stable identifier recorded with results.
    fn id(&self) -> &str;
    fn score(&mut self, image: &RgbImage, text: &str) -> Result<f64, ClientError>;
}

/// Embeds images into a feature space for distributional comparison.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    /// Feature dimensionality.
    fn dim(&self) -> usize;
    fn extract(&mut self, images: &[RgbImage]) -> Result<FeatureBatch, ClientError>;
}

/// Produces class-probability rows for images.
pub trait ProbClassifier {
    fn id(&self) -> &str;
    /// Number of classes.
    fn classes(&self) -> usize;
    fn probs(&mut self, images: &[RgbImage]) -> Result<ProbBatch, ClientError>;
}

/// A row-major `n x dim` feature matrix tagged with its extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    pub extractor_id: String,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(
        extractor_id: impl Into<String>,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(MetricsError::InvalidParameter(alloc::format!(
                "feature buffer of {} values does not divide into rows of {dim}",
                data.len()
            )));
        }
        Ok(Self {
            extractor_id: extractor_id.into(),
            dim,
            data,
        })
    }

    /// Number of rows.
    #[must_use]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[must_use]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// A row-major `n x classes` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbBatch {
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbBatch {
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        if classes == 0 || data.len() % classes != 0 {
            return Err(MetricsError::InvalidParameter(alloc::format!(
                "probability buffer of {} values does not divide into rows of {classes}",
                data.len()
            )));
        }
        let batch = Self { classes, data };
        batch.validate_rows()?;
        Ok(batch)
    }

    fn validate_rows(&self) -> Result<(), MetricsError> {
        for row in 0..self.len() {
            let r = self.row(row);
            let mut sum = 0.0;
            for &p in r {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(MetricsError::DegenerateProbs {
                        row,
                        detail: alloc::format!("entry {p} is negative or non-finite"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MetricsError::DegenerateProbs {
                    row,
                    detail: alloc::format!("row sums to {sum}, expected 1"),
                });
            }
        }
        Ok(())
    }

    /// Number of rows.
    #[must_use]
    pub fn len(&self) -> usize {
        self.data.len() / self.classes
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[must_use]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images; infinite when the
/// images are identical.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * Float::log10(mse))
}

/// Mean image/text agreement over pairs, scaled by 100.
pub fn clip_score(
    images: &[RgbImage],
    prompts: &[String],
    scorer: &mut dyn ScorerClient,
) -> Result<f64, MetricsError> {
    if images.len() != prompts.len() {
        return Err(MetricsError::LengthMismatch {
            left: images.len(),
            right: prompts.len(),
        });
    }
    if images.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for (image, prompt) in images.iter().zip(prompts) {
        total += scorer.score(image, prompt)?;
    }
    Ok(100.0 * total / images.len() as f64)
}

/// Inception-style diversity score: rows are split into up to
/// [`IS_MAX_SPLITS`] groups, each scored as `exp(mean KL(row ‖ marginal))`,
/// and the per-split scores are averaged.
///
/// When the row count does not divide evenly, the trailing remainder joins
/// the last split.
pub fn inception_score(probs: &ProbBatch, splits: usize) -> Result<f64, MetricsError> {
    if splits == 0 {
        return Err(MetricsError::InvalidParameter(
            "splits must be at least 1".into(),
        ));
    }
    let n = probs.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if n < splits {
        return Err(MetricsError::InvalidParameter(alloc::format!(
            "{n} rows cannot fill {splits} splits"
        )));
    }
    let chunk = n / splits;
    let mut total = 0.0;
    for s in 0..splits {
        let start = s * chunk;
        let end = if s == splits - 1 { n } else { start + chunk };
        let rows = end - start;
        let mut marginal = alloc::vec![0.0; probs.classes];
        for row in start..end {
            for (m, &p) in marginal.iter_mut().zip(probs.row(row)) {
                *m += p;
            }
        }
        for m in &mut marginal {
            *m /= rows as f64;
        }
        let mut kl_sum = 0.0;
        for row in start..end {
            let mut kl = 0.0;
            for (&p, &m) in probs.row(row).iter().zip(&marginal) {
                if p > 0.0 {
                    // m >= p / rows > 0 whenever p > 0.
                    kl += p * (Float::ln(p) - Float::ln(m));
                }
            }
            kl_sum += kl;
        }
        total += Float::exp(kl_sum / rows as f64);
    }
    Ok(total / splits as f64)
}

/// Identity of an evaluated condition, attached to its metric row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionLabels {
    /// Model that generated the evaluated images.
    pub model: String,
    /// Condition name: a module target, a defense, or a baseline label.
    pub condition: String,
    /// Dataset identifier.
    pub dataset: String,
}

/// One row of evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub labels: ConditionLabels,
    /// Number of image pairs aggregated.
    pub items: usize,
    pub clip: f64,
    /// Mean PSNR in dB; serialized as the string `"inf"` when infinite
    /// (identical images), since JSON has no infinity literal.
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub msssim: f64,
    pub fid: f64,
    pub inception: f64,
}

/// Serializes possibly-infinite PSNR values losslessly into JSON.
pub mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() {
            "inf".serialize(ser)
        } else {
            value.serialize(ser)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(alloc::string::String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Text(s) => Err(serde::de::Error::custom(alloc::format!(
                "expected a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Evaluates one condition with an explicit Fréchet reference image set.
///
/// `benign` and `adversarial` are the editor's outputs for the same items
/// under benign and attacked inputs; pairwise metrics (PSNR, SSIM, MS-SSIM)
/// compare them index-by-index, prompt fidelity scores `adversarial` against
/// `prompts`, the Fréchet distance compares `adversarial` against
/// `fid_reference`, and the inception-style score is computed on
/// `adversarial` with `min(10, items)` splits.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition_with_reference(
    benign: &[RgbImage],
    adversarial: &[RgbImage],
    prompts: &[String],
    fid_reference: &[RgbImage],
    scorer: &mut dyn ScorerClient,
    extractor: &mut dyn FeatureExtractor,
    classifier: &mut dyn ProbClassifier,
    labels: ConditionLabels,
) -> Result<MetricsReport, MetricsError> {
    if benign.len() != adversarial.len() {
        return Err(MetricsError::LengthMismatch {
            left: benign.len(),
            right: adversarial.len(),
        });
    }
    if benign.len() != prompts.len() {
        return Err(MetricsError::LengthMismatch {
            left: benign.len(),
            right: prompts.len(),
        });
    }
    if benign.is_empty() {
        return Err(MetricsError::Empty);
    }

    let clip = clip_score(adversarial, prompts, scorer)?;

    let n = benign.len() as f64;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut msssim_sum = 0.0;
    for (b, a) in benign.iter().zip(adversarial) {
        psnr_sum += psnr(b, a)?;
        ssim_sum += ssim(b, a)?;
        msssim_sum += msssim(b, a)?;
    }

    let ref_features = extractor.extract(fid_reference)?;
    let adv_features = extractor.extract(adversarial)?;
    let fid_value = fid(&ref_features, &adv_features)?;

    let probs = classifier.probs(adversarial)?;
    let splits = benign.len().min(IS_MAX_SPLITS);
    let inception = inception_score(&probs, splits)?;

    Ok(MetricsReport {
        labels,
        items: benign.len(),
        clip,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        msssim: msssim_sum / n,
        fid: fid_value,
        inception,
    })
}

/// Evaluates one condition using the benign outputs as the Fréchet
/// reference set; see [`evaluate_condition_with_reference`].
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition(
    benign: &[RgbImage],
    adversarial: &[RgbImage],
    prompts: &[String],
    scorer: &mut dyn ScorerClient,
    extractor: &mut dyn FeatureExtractor,
    classifier: &mut dyn ProbClassifier,
    labels: ConditionLabels,
) -> Result<MetricsReport, MetricsError> {
    evaluate_condition_with_reference(
        benign,
        adversarial,
        prompts,
        benign,
        scorer,
        extractor,
        classifier,
        labels,
    )
}
