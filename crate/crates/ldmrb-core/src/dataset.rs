//! Benchmark-dataset construction from a captioned, annotated corpus.
//!
//! The pipelines turn raw records (image + captions + instance annotations)
//! into editing benchmarks:
//!
//! * **Variation pairs** — images paired with five editing prompts:
//!   caption-quality ranking selects the best images, their top captions are
//!   expanded into candidate prompts by an LLM, and the candidates are
//!   re-ranked by actually editing the image and scoring the result.
//! * **Inpainting triplets** — additionally pick the image's main entity,
//!   build its keep-mask, and crop a square window centred on it.
//!
//! Every step is deterministic given the injected clients and seeds, so the
//! same corpus always yields byte-identical manifests.

use alloc::format;
#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, DiffusionModel, EditRequest};
use crate::attack::AttackError;
use crate::image::{ImageError, KeepMask, RgbImage};
use crate::metrics::{ClientError, ScorerClient};

/// Query sent to the LLM to expand one caption into candidate prompts.
/// The placeholder `<xxx>` is replaced by the caption.
pub const PROMPT_QUERY_TEMPLATE: &str = "Please modify the following sentence <xxx> to generate 5 similar scenes without changing the entities.";

/// Number of prompts one caption expands into.
pub const PROMPTS_PER_CAPTION: usize = 5;

/// A text-completion client used for prompt expansion.
pub trait LlmClient {
    /// Stable identifier recorded with manifests.
    fn id(&self) -> &str;
    fn complete(&mut self, query: &str) -> Result<String, ClientError>;
}

/// Axis-aligned box in pixel coordinates, `(x, y)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// One instance annotation: category, box, pixel area, and keep-mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category: String,
    pub bbox: BBox,
    /// Annotated pixel area; validated against the mask within 10%.
    pub area: f64,
    pub mask: KeepMask,
}

/// One corpus record: an image with captions and instance annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoRecord {
    pub image_id: u64,
    pub file_name: String,
    pub image: RgbImage,
    pub captions: Vec<String>,
    pub annotations: Vec<Annotation>,
}

impl CocoRecord {
    /// Validates internal consistency: mask dimensions, boxes inside bounds,
    /// and mask area within 10% of the annotated area.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let (h, w) = (self.image.height(), self.image.width());
        for (i, ann) in self.annotations.iter().enumerate() {
            if ann.mask.height() != h || ann.mask.width() != w {
                return Err(DatasetError::InvalidRecord {
                    image_id: self.image_id,
                    detail: format!(
                        "annotation {i} mask {}x{} vs image {h}x{w}",
                        ann.mask.height(),
                        ann.mask.width()
                    ),
                });
            }
            if ann.bbox.x < 0.0
                || ann.bbox.y < 0.0
                || ann.bbox.w <= 0.0
                || ann.bbox.h <= 0.0
                || ann.bbox.x + ann.bbox.w > w as f64 + 1e-9
                || ann.bbox.y + ann.bbox.h > h as f64 + 1e-9
            {
                return Err(DatasetError::InvalidRecord {
                    image_id: self.image_id,
                    detail: format!("annotation {i} bbox out of bounds"),
                });
            }
            let mask_area = ann.mask.kept_count() as f64;
            if ann.area <= 0.0 || (mask_area - ann.area).abs() > 0.1 * ann.area {
                return Err(DatasetError::InvalidRecord {
                    image_id: self.image_id,
                    detail: format!(
                        "annotation {i} mask area {mask_area} inconsistent with annotated {}",
                        ann.area
                    ),
                });
            }
        }
        Ok(())
    }
}

/// A candidate editing prompt, tracking its source caption and (once
/// ranked) its edit-quality score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub text: String,
    pub source_caption: String,
    pub score: Option<f64>,
}

/// A variation-benchmark item: an image and its five editing prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub image_id: u64,
    pub file_name: String,
    pub prompts: Vec<String>,
    /// Set by human review; pipelines always emit `false`.
    pub human_approved: bool,
}

/// An inpainting-benchmark item: cropped image, keep-mask, entity category,
/// and five editing prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTriplet {
    pub image_id: u64,
    pub file_name: String,
    pub image: RgbImage,
    pub mask: KeepMask,
    pub entity_category: String,
    pub prompts: Vec<String>,
    pub human_approved: bool,
}

/// Square-crop parameters for inpainting items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Margin around the entity box, as a fraction of each box side.
    pub margin: f64,
    /// The window is at least this multiple of the box's longer side.
    pub min_window_factor: f64,
    /// Output side length after resizing the window.
    pub output_size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            min_window_factor: 1.2,
            output_size: 512,
        }
    }
}

/// Pipeline parameters shared by both dataset builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Fraction of the corpus kept by image ranking.
    pub image_fraction: f64,
    /// Captions expanded per selected image.
    pub captions_per_image: usize,
    /// Prompts kept per item after edit-quality ranking.
    pub final_prompts: usize,
    /// Seed for the ranking edits.
    pub rank_seed: u64,
    /// Denoising steps for the ranking edits (a coarse schedule; ranking
    /// only needs relative quality).
    pub rank_steps: usize,
    pub crop: CropConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_fraction: 0.1,
            captions_per_image: 3,
            final_prompts: 5,
            rank_seed: 0,
            rank_steps: 15,
            crop: CropConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.image_fraction > 0.0 && self.image_fraction <= 1.0) {
            return Err(DatasetError::InvalidConfig(format!(
                "image_fraction {} outside (0, 1]",
                self.image_fraction
            )));
        }
        if self.captions_per_image == 0 || self.final_prompts == 0 || self.rank_steps == 0 {
            return Err(DatasetError::InvalidConfig(
                "captions_per_image, final_prompts, and rank_steps must be positive".into(),
            ));
        }
        if self.crop.margin < 0.0 || self.crop.min_window_factor < 1.0 || self.crop.output_size == 0
        {
            return Err(DatasetError::InvalidConfig(
                "crop margin must be >= 0, min_window_factor >= 1, output_size positive".into(),
            ));
        }
        Ok(())
    }
}

/// Errors from dataset construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("corpus holds no records")]
    EmptyCorpus,
    #[error("record {image_id} has no captions")]
    NoCaptions { image_id: u64 },
    #[error("record {image_id} has no annotations")]
    NoAnnotations { image_id: u64 },
    #[error("record {image_id} is inconsistent: {detail}")]
    InvalidRecord { image_id: u64, detail: String },
    #[error("mask has no kept pixels")]
    MaskEmpty,
    #[error("LLM response unusable after retry: {0}")]
    ParseFailure(String),
    #[error("crop window of side {side} cannot contain the {bbox_h}x{bbox_w} entity box")]
    CropWindowTooSmall {
        side: usize,
        bbox_h: usize,
        bbox_w: usize,
    },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Ranks corpus records by mean image/caption agreement and returns the
/// indices of the top `ceil(fraction * N)`, best first; ties break toward
/// the smaller `image_id`.
pub fn rank_images(
    corpus: &[CocoRecord],
    scorer: &mut dyn ScorerClient,
    fraction: f64,
) -> Result<Vec<usize>, DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidConfig(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let mut scored = Vec::with_capacity(corpus.len());
    for (idx, record) in corpus.iter().enumerate() {
        if record.captions.is_empty() {
            return Err(DatasetError::NoCaptions {
                image_id: record.image_id,
            });
        }
        let mut total = 0.0;
        for caption in &record.captions {
            total += scorer.score(&record.image, caption)?;
        }
        scored.push((idx, total / record.captions.len() as f64));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| corpus[a.0].image_id.cmp(&corpus[b.0].image_id))
    });
    let keep = ((fraction * corpus.len() as f64).ceil() as usize).max(1);
    Ok(scored.into_iter().take(keep).map(|(idx, _)| idx).collect())
}

/// Returns the record's `k` best captions by image/caption agreement, best
/// first; ties keep the original caption order.
pub fn select_top_captions(
    record: &CocoRecord,
    scorer: &mut dyn ScorerClient,
    k: usize,
) -> Result<Vec<String>, DatasetError> {
    if record.captions.is_empty() {
        return Err(DatasetError::NoCaptions {
            image_id: record.image_id,
        });
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(record.captions.len());
    for (idx, caption) in record.captions.iter().enumerate() {
        scored.push((idx, scorer.score(&record.image, caption)?));
    }
    // Stable sort keeps original order among equal scores.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(idx, _)| record.captions[idx].clone())
        .collect())
}

/// Builds the exact LLM query for one caption.
#[must_use]
pub fn build_prompt_query(caption: &str) -> String {
    PROMPT_QUERY_TEMPLATE.replace("xxx", caption)
}

/// Parses an LLM response into exactly [`PROMPTS_PER_CAPTION`] prompts.
///
/// Accepts numbered lines (`1.` / `1)`), bulleted lines (`-` / `*`), or five
/// bare non-empty lines; anything else is a parse failure.
pub fn parse_prompt_response(response: &str) -> Result<Vec<String>, DatasetError> {
    let mut numbered = Vec::new();
    let mut bare = Vec::new();
    for line in response.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        bare.push(line);
        let without_number = line
            .char_indices()
            .take_while(|(_, c)| c.is_ascii_digit())
            .last()
            .map(|(i, _)| &line[i + 1..])
            .filter(|rest| rest.starts_with('.') || rest.starts_with(')'))
            .map(|rest| rest[1..].trim());
        if let Some(text) = without_number {
            if !text.is_empty() {
                numbered.push(text);
            }
        }
    }
    let candidates: Vec<&str> = if numbered.len() == PROMPTS_PER_CAPTION {
        numbered
    } else if bare.len() == PROMPTS_PER_CAPTION {
        bare.into_iter()
            .map(|l| l.trim_start_matches(['-', '*']).trim())
            .collect()
    } else {
        return Err(DatasetError::ParseFailure(format!(
            "expected {PROMPTS_PER_CAPTION} prompts, found {} numbered / {} plain lines",
            numbered.len(),
            bare.len()
        )));
    };
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(DatasetError::ParseFailure("empty prompt line".into()));
    }
    Ok(candidates.into_iter().map(String::from).collect())
}

/// Expands one caption into [`PROMPTS_PER_CAPTION`] candidate prompts via
/// the LLM, retrying once on an unparseable response.
pub fn generate_prompts(
    caption: &str,
    llm: &mut dyn LlmClient,
) -> Result<Vec<CandidatePrompt>, DatasetError> {
    let query = build_prompt_query(caption);
    let mut last_err = None;
    for attempt in 0..2 {
        let response = llm.complete(&query)?;
        match parse_prompt_response(&response) {
            Ok(prompts) => {
                return Ok(prompts
                    .into_iter()
                    .map(|text| CandidatePrompt {
                        text,
                        source_caption: caption.into(),
                        score: None,
                    })
                    .collect())
            }
            Err(e) => {
                log::debug!("prompt parse attempt {attempt} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("two attempts recorded an error"))
}

/// Ranks candidate prompts by editing `source` with each prompt and scoring
/// the result against the prompt text; returns the best `k`, best first,
/// with scores filled in. Ties keep candidate order.
pub fn rank_prompts(
    source: &RgbImage,
    candidates: &[CandidatePrompt],
    generator: &mut dyn DiffusionModel,
    scorer: &mut dyn ScorerClient,
    k: usize,
    seed: u64,
    steps: usize,
) -> Result<Vec<CandidatePrompt>, DatasetError> {
    if candidates.is_empty() {
        return Err(DatasetError::InvalidConfig(
            "no candidate prompts to rank".into(),
        ));
    }
    let mut ranked: Vec<CandidatePrompt> = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let request = EditRequest::new(source.clone(), candidate.text.clone())
            .with_seed(seed)
            .with_steps(steps);
        let edited = generator.run_edit(&request, &[])?.image;
        let score = scorer.score(&edited, &candidate.text)?;
        ranked.push(CandidatePrompt {
            score: Some(score),
            ..candidate.clone()
        });
    }
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Picks the record's main entity: among the five largest annotations (by
/// area, ties toward earlier annotations), the category whose name best
/// matches the image wins, and the masks of those largest annotations
/// sharing that category are unioned into the keep-mask.
pub fn find_main_entity(
    record: &CocoRecord,
    scorer: &mut dyn ScorerClient,
) -> Result<(KeepMask, String), DatasetError> {
    if record.annotations.is_empty() {
        return Err(DatasetError::NoAnnotations {
            image_id: record.image_id,
        });
    }
    let mut order: Vec<usize> = (0..record.annotations.len()).collect();
    order.sort_by(|&a, &b| {
        record.annotations[b]
            .area
            .partial_cmp(&record.annotations[a].area)
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let top: Vec<usize> = order.into_iter().take(5).collect();

    // Unique candidate categories in first-occurrence order.
    let mut categories: Vec<&str> = Vec::new();
    for &i in &top {
        let cat = record.annotations[i].category.as_str();
        if !categories.contains(&cat) {
            categories.push(cat);
        }
    }
    let mut best: Option<(&str, f64)> = None;
    for cat in categories {
        let score = scorer.score(&record.image, cat)?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((cat, score));
        }
    }
    let (category, _) = best.expect("at least one category");

    let mut mask: Option<KeepMask> = None;
    for &i in &top {
        if record.annotations[i].category == category {
            mask = Some(match mask {
                None => record.annotations[i].mask.clone(),
                Some(m) => m.union(&record.annotations[i].mask)?,
            });
        }
    }
    let mask = mask.ok_or(DatasetError::MaskEmpty)?;
    Ok((mask, String::from(category)))
}

/// Crops a square window around the mask's bounding box — with a margin on
/// every side and at least `min_window_factor` times the box's longer side,
/// clipped to the image and translated minimally to stay inside — then
/// resizes the window to `output_size` (bilinear for the image, nearest for
/// the mask).
///
/// The window always contains the full entity box, so no mask pixel is
/// discarded by the crop itself.
pub fn adaptive_center_crop(
    image: &RgbImage,
    mask: &KeepMask,
    cfg: &CropConfig,
) -> Result<(RgbImage, KeepMask), DatasetError> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(DatasetError::Image(ImageError::DimensionMismatch {
            left_h: mask.height(),
            left_w: mask.width(),
            right_h: image.height(),
            right_w: image.width(),
        }));
    }
    let (top, left, bh, bw) = mask.bounding_box().ok_or(DatasetError::MaskEmpty)?;
    let longer = bh.max(bw);
    let with_margin_h = bh as f64 * (1.0 + 2.0 * cfg.margin);
    let with_margin_w = bw as f64 * (1.0 + 2.0 * cfg.margin);
    let wanted = with_margin_h
        .max(with_margin_w)
        .max(cfg.min_window_factor * longer as f64)
        .ceil() as usize;
    let side = wanted.min(image.height()).min(image.width());
    if side < bh || side < bw {
        return Err(DatasetError::CropWindowTooSmall {
            side,
            bbox_h: bh,
            bbox_w: bw,
        });
    }
    let center_y = top as f64 + bh as f64 / 2.0;
    let center_x = left as f64 + bw as f64 / 2.0;
    let max_top = image.height() - side;
    let max_left = image.width() - side;
    let win_top = ((center_y - side as f64 / 2.0).round().max(0.0) as usize).min(max_top);
    let win_left = ((center_x - side as f64 / 2.0).round().max(0.0) as usize).min(max_left);
    // Minimal in-bounds translation keeps the box inside the window.
    let win_top = win_top.min(top).max((top + bh).saturating_sub(side));
    let win_left = win_left.min(left).max((left + bw).saturating_sub(side));

    let cropped_image = image.crop(win_top, win_left, side, side)?;
    let cropped_mask = mask.crop(win_top, win_left, side, side)?;
    debug_assert_eq!(
        cropped_mask.kept_count(),
        mask.kept_count(),
        "crop discarded mask pixels"
    );
    let out_image = cropped_image.resize_bilinear(cfg.output_size, cfg.output_size);
    let out_mask = cropped_mask.resize_nearest(cfg.output_size, cfg.output_size)?;
    Ok((out_image, out_mask))
}

/// Expands and ranks prompts for one record: its top captions each generate
/// candidates, and the pooled candidates are ranked by edit quality.
fn prompts_for_record(
    record: &CocoRecord,
    scorer: &mut dyn ScorerClient,
    llm: &mut dyn LlmClient,
    generator: &mut dyn DiffusionModel,
    cfg: &PipelineConfig,
) -> Result<Vec<String>, DatasetError> {
    let captions = select_top_captions(record, scorer, cfg.captions_per_image)?;
    let mut pool = Vec::new();
    for caption in &captions {
        pool.extend(generate_prompts(caption, llm)?);
    }
    let ranked = rank_prompts(
        &record.image,
        &pool,
        generator,
        scorer,
        cfg.final_prompts,
        cfg.rank_seed,
        cfg.rank_steps,
    )?;
    Ok(ranked.into_iter().map(|c| c.text).collect())
}

/// Builds variation-benchmark pairs from a corpus. Returned pairs follow the
/// image ranking order.
pub fn build_variation_dataset(
    corpus: &[CocoRecord],
    scorer: &mut dyn ScorerClient,
    llm: &mut dyn LlmClient,
    generator: &mut dyn DiffusionModel,
    cfg: &PipelineConfig,
) -> Result<Vec<DataPair>, DatasetError> {
    cfg.validate()?;
    let selected = rank_images(corpus, scorer, cfg.image_fraction)?;
    let mut pairs = Vec::with_capacity(selected.len());
    for idx in selected {
        let record = &corpus[idx];
        record.validate()?;
        let prompts = prompts_for_record(record, scorer, llm, generator, cfg)?;
        pairs.push(DataPair {
            image_id: record.image_id,
            file_name: record.file_name.clone(),
            prompts,
            human_approved: false,
        });
    }
    Ok(pairs)
}

/// Builds inpainting-benchmark triplets from a corpus: prompt selection as
/// in the variation pipeline, then main-entity masking and square cropping.
pub fn build_inpainting_dataset(
    corpus: &[CocoRecord],
    scorer: &mut dyn ScorerClient,
    llm: &mut dyn LlmClient,
    generator: &mut dyn DiffusionModel,
    cfg: &PipelineConfig,
) -> Result<Vec<DataTriplet>, DatasetError> {
    cfg.validate()?;
    let selected = rank_images(corpus, scorer, cfg.image_fraction)?;
    let mut triplets = Vec::with_capacity(selected.len());
    for idx in selected {
        let record = &corpus[idx];
        record.validate()?;
        let prompts = prompts_for_record(record, scorer, llm, generator, cfg)?;
        let (mask, entity_category) = find_main_entity(record, scorer)?;
        let (image, mask) = adaptive_center_crop(&record.image, &mask, &cfg.crop)?;
        triplets.push(DataTriplet {
            image_id: record.image_id,
            file_name: record.file_name.clone(),
            image,
            mask,
            entity_category,
            prompts,
            human_approved: false,
        });
    }
    Ok(triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::toy::build_toy_model;
    use crate::mock::{MockLlm, MockScorer, ScriptedLlm};
    use alloc::string::ToString;
    use alloc::vec;
    use num_traits::Float;

    fn record(image_id: u64, brightness: f64, captions: &[&str]) -> CocoRecord {
        let image = RgbImage::from_fn(32, 32, |y, x, c| {
            (brightness + 0.2 * Float::sin(0.2 * y as f64 + 0.3 * x as f64 + c as f64))
                .clamp(0.0, 1.0)
        })
        .unwrap();
        CocoRecord {
            image_id,
            file_name: format!("img{image_id}.png"),
            image,
            captions: captions.iter().map(|c| c.to_string()).collect(),
            annotations: Vec::new(),
        }
    }

    fn block_mask(h: usize, w: usize, top: usize, left: usize, bh: usize, bw: usize) -> KeepMask {
        KeepMask::from_fn(h, w, |y, x| {
            (top..top + bh).contains(&y) && (left..left + bw).contains(&x)
        })
        .unwrap()
    }

    fn annotated_record(image_id: u64) -> CocoRecord {
        let mut rec = record(image_id, 0.5, &["a dog beside a tree", "a dog outdoors"]);
        let dog = block_mask(32, 32, 4, 4, 12, 10);
        let tree = block_mask(32, 32, 20, 20, 8, 8);
        rec.annotations = vec![
            Annotation {
                category: "dog".into(),
                bbox: BBox {
                    x: 4.0,
                    y: 4.0,
                    w: 10.0,
                    h: 12.0,
                },
                area: dog.kept_count() as f64,
                mask: dog,
            },
            Annotation {
                category: "tree".into(),
                bbox: BBox {
                    x: 20.0,
                    y: 20.0,
                    w: 8.0,
                    h: 8.0,
                },
                area: tree.kept_count() as f64,
                mask: tree,
            },
        ];
        rec
    }

    #[test]
    fn rank_images_takes_the_ceiling_and_breaks_ties_by_id() {
        let corpus: Vec<CocoRecord> = (0..10)
            .map(|i| record(i, 0.1 + 0.08 * i as f64, &["caption"]))
            .collect();
        let mut scorer = MockScorer::new();
        let top = rank_images(&corpus, &mut scorer, 0.25).unwrap();
        assert_eq!(top.len(), 3); // ceil(0.25 * 10)
        // Brute-force oracle: recompute and compare ordering.
        let mut expect: Vec<(usize, f64)> = corpus
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = MockScorer::new().score(&r.image, &r.captions[0]).unwrap();
                (i, s)
            })
            .collect();
        expect.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(corpus[a.0].image_id.cmp(&corpus[b.0].image_id))
        });
        let expect_top: Vec<usize> = expect.into_iter().take(3).map(|(i, _)| i).collect();
        assert_eq!(top, expect_top);
    }

    #[test]
    fn rank_images_rejects_empty_and_bad_fractions() {
        let mut scorer = MockScorer::new();
        assert!(matches!(
            rank_images(&[], &mut scorer, 0.5),
            Err(DatasetError::EmptyCorpus)
        ));
        let corpus = vec![record(0, 0.5, &["c"])];
        assert!(rank_images(&corpus, &mut scorer, 0.0).is_err());
        assert!(rank_images(&corpus, &mut scorer, 1.5).is_err());
    }

    #[test]
    fn select_top_captions_orders_by_score() {
        let rec = record(1, 0.5, &["first", "second", "third", "fourth"]);
        let mut scorer = MockScorer::new();
        let top = select_top_captions(&rec, &mut scorer, 2).unwrap();
        assert_eq!(top.len(), 2);
        // Oracle: exhaustive scoring.
        let mut scored: Vec<(usize, f64)> = rec
            .captions
            .iter()
            .enumerate()
            .map(|(i, c)| (i, MockScorer::new().score(&rec.image, c).unwrap()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(top[0], rec.captions[scored[0].0]);
        assert_eq!(top[1], rec.captions[scored[1].0]);
    }

    #[test]
    fn query_template_embeds_the_caption() {
        let q = build_prompt_query("a dog on grass");
        assert_eq!(
            q,
            "Please modify the following sentence <a dog on grass> to generate 5 similar scenes without changing the entities."
        );
    }

    #[test]
    fn parser_accepts_numbered_bulleted_and_bare_lines() {
        let numbered = "1. one\n2. two\n3. three\n4. four\n5. five\n";
        assert_eq!(parse_prompt_response(numbered).unwrap().len(), 5);
        let parens = "1) one\n2) two\n3) three\n4) four\n5) five";
        assert_eq!(parse_prompt_response(parens).unwrap()[4], "five");
        let bullets = "- one\n- two\n- three\n- four\n- five";
        assert_eq!(parse_prompt_response(bullets).unwrap()[0], "one");
        let bare = "one\ntwo\nthree\nfour\nfive";
        assert_eq!(parse_prompt_response(bare).unwrap()[2], "three");
    }

    #[test]
    fn parser_rejects_wrong_counts() {
        assert!(parse_prompt_response("1. one\n2. two").is_err());
        assert!(parse_prompt_response("").is_err());
        let six = "1. a\n2. b\n3. c\n4. d\n5. e\n6. f";
        assert!(parse_prompt_response(six).is_err());
    }

    #[test]
    fn numbered_parse_survives_surrounding_chatter() {
        let chatty = "Sure! Here are five variations:\n1. one\n2. two\n3. three\n4. four\n5. five\nHope this helps!";
        let prompts = parse_prompt_response(chatty).unwrap();
        assert_eq!(prompts, vec!["one", "two", "three", "four", "five"]);
    }

    #[test]
    fn generate_prompts_retries_once_then_fails() {
        // First response malformed, second fine: succeeds with one retry.
        let good = "1. a\n2. b\n3. c\n4. d\n5. e".to_string();
        let mut llm = ScriptedLlm::new(vec!["only one line".into(), good.clone()]);
        let prompts = generate_prompts("cap", &mut llm).unwrap();
        assert_eq!(prompts.len(), 5);
        assert_eq!(llm.consumed(), 2);
        assert!(prompts.iter().all(|p| p.source_caption == "cap"));

        // Two malformed responses: parse failure.
        let mut llm = ScriptedLlm::new(vec!["bad".into(), "also bad".into()]);
        assert!(matches!(
            generate_prompts("cap", &mut llm),
            Err(DatasetError::ParseFailure(_))
        ));

        // LLM outage propagates as a client error.
        let mut llm = ScriptedLlm::new(vec![]);
        assert!(matches!(
            generate_prompts("cap", &mut llm),
            Err(DatasetError::Client(ClientError::Unavailable(_)))
        ));
    }

    #[test]
    fn rank_prompts_orders_by_edit_score() {
        let rec = record(1, 0.5, &["c"]);
        let candidates: Vec<CandidatePrompt> = ["alpha", "beta", "gamma", "delta"]
            .iter()
            .map(|t| CandidatePrompt {
                text: t.to_string(),
                source_caption: "c".into(),
                score: None,
            })
            .collect();
        let mut gen = build_toy_model(1, 2, 1).unwrap();
        let mut scorer = MockScorer::new();
        let ranked = rank_prompts(&rec.image, &candidates, &mut gen, &mut scorer, 3, 7, 1).unwrap();
        assert_eq!(ranked.len(), 3);
        let scores: Vec<f64> = ranked.iter().map(|c| c.score.unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "not sorted: {scores:?}");

        // Oracle: score every candidate the same way and compare the top-3 set.
        let mut gen2 = build_toy_model(1, 2, 1).unwrap();
        let mut oracle: Vec<(String, f64)> = candidates
            .iter()
            .map(|cand| {
                let req = EditRequest::new(rec.image.clone(), cand.text.clone())
                    .with_seed(7)
                    .with_steps(1);
                let edited = gen2.run_edit(&req, &[]).unwrap().image;
                let s = MockScorer::new().score(&edited, &cand.text).unwrap();
                (cand.text.clone(), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let expect: Vec<&String> = oracle.iter().take(3).map(|(t, _)| t).collect();
        let got: Vec<&String> = ranked.iter().map(|c| &c.text).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn find_main_entity_unions_by_category() {
        let rec = annotated_record(1);
        let mut scorer = MockScorer::new();
        let (mask, category) = find_main_entity(&rec, &mut scorer).unwrap();
        assert!(category == "dog" || category == "tree");
        let expected: usize = rec
            .annotations
            .iter()
            .filter(|a| a.category == category)
            .map(|a| a.mask.kept_count())
            .sum();
        assert_eq!(mask.kept_count(), expected);

        let empty = record(2, 0.5, &["c"]);
        assert!(matches!(
            find_main_entity(&empty, &mut scorer),
            Err(DatasetError::NoAnnotations { image_id: 2 })
        ));
    }

    #[test]
    fn crop_contains_the_full_entity_and_resizes() {
        let image = RgbImage::from_fn(64, 48, |y, x, _| {
            ((y * 48 + x) % 97) as f64 / 96.0
        })
        .unwrap();
        let mask = block_mask(64, 48, 10, 8, 16, 12);
        let cfg = CropConfig {
            output_size: 32,
            ..CropConfig::default()
        };
        let (out_img, out_mask) = adaptive_center_crop(&image, &mask, &cfg).unwrap();
        assert_eq!(out_img.height(), 32);
        assert_eq!(out_img.width(), 32);
        assert_eq!(out_mask.height(), 32);
        assert!(out_mask.kept_count() > 0);
    }

    #[test]
    fn crop_window_honours_margin_and_factor() {
        // Box 10x10 at (20, 20) in 64x64: window side must be
        // ceil(max(10*1.2, 10*1.2)) = 12.
        let image = RgbImage::constant(64, 64, 0.5).unwrap();
        let mask = block_mask(64, 64, 20, 20, 10, 10);
        let cfg = CropConfig {
            margin: 0.1,
            min_window_factor: 1.2,
            output_size: 12,
        };
        // With output == window size the mask survives losslessly; its
        // bounding box inside the window must match the original box size.
        let (_, out_mask) = adaptive_center_crop(&image, &mask, &cfg).unwrap();
        let (_, _, bh, bw) = out_mask.bounding_box().unwrap();
        assert_eq!((bh, bw), (10, 10));
    }

    #[test]
    fn crop_translates_windows_at_the_border() {
        let image = RgbImage::constant(40, 40, 0.5).unwrap();
        // Box flush against the top-left corner.
        let mask = block_mask(40, 40, 0, 0, 10, 10);
        let cfg = CropConfig {
            output_size: 12,
            ..CropConfig::default()
        };
        let (_, out_mask) = adaptive_center_crop(&image, &mask, &cfg).unwrap();
        assert_eq!(out_mask.kept_count(), 100);
    }

    #[test]
    fn oversized_entities_are_rejected() {
        let image = RgbImage::constant(20, 60, 0.5).unwrap();
        // Box taller than the image is wide: no square window fits.
        let mask = block_mask(20, 60, 1, 5, 18, 40);
        let err = adaptive_center_crop(&image, &mask, &CropConfig::default()).unwrap_err();
        assert!(matches!(err, DatasetError::CropWindowTooSmall { .. }));
    }

    #[test]
    fn variation_pipeline_is_deterministic() {
        let corpus: Vec<CocoRecord> = (0..6)
            .map(|i| {
                record(
                    i,
                    0.2 + 0.1 * i as f64,
                    &["a dog beside a tree", "an animal outdoors"],
                )
            })
            .collect();
        let cfg = PipelineConfig {
            image_fraction: 0.34,
            captions_per_image: 2,
            rank_steps: 1,
            ..PipelineConfig::default()
        };
        let build = || {
            let mut scorer = MockScorer::new();
            let mut llm = MockLlm::new();
            let mut gen = build_toy_model(1, 2, 1).unwrap();
            build_variation_dataset(&corpus, &mut scorer, &mut llm, &mut gen, &cfg).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3); // ceil(0.34 * 6) = ceil(2.04)
        for pair in &a {
            assert_eq!(pair.prompts.len(), 5);
            assert!(!pair.human_approved);
        }
    }

    #[test]
    fn inpainting_pipeline_produces_cropped_triplets() {
        let corpus: Vec<CocoRecord> = (0..3).map(annotated_record).collect();
        let cfg = PipelineConfig {
            image_fraction: 0.5,
            captions_per_image: 2,
            rank_steps: 1,
            crop: CropConfig {
                output_size: 16,
                ..CropConfig::default()
            },
            ..PipelineConfig::default()
        };
        let mut scorer = MockScorer::new();
        let mut llm = MockLlm::new();
        let mut gen = build_toy_model(1, 2, 1).unwrap();
        let triplets =
            build_inpainting_dataset(&corpus, &mut scorer, &mut llm, &mut gen, &cfg).unwrap();
        assert_eq!(triplets.len(), 2);
        for t in &triplets {
            assert_eq!(t.image.height(), 16);
            assert_eq!(t.mask.height(), 16);
            assert_eq!(t.prompts.len(), 5);
            assert!(!t.entity_category.is_empty());
        }
    }

    #[test]
    fn record_validation_catches_inconsistencies() {
        let mut rec = annotated_record(1);
        assert!(rec.validate().is_ok());
        rec.annotations[0].area *= 2.0;
        assert!(matches!(
            rec.validate(),
            Err(DatasetError::InvalidRecord { image_id: 1, .. })
        ));
        let mut rec = annotated_record(1);
        rec.annotations[1].bbox.x = 60.0;
        assert!(rec.validate().is_err());
    }
}
