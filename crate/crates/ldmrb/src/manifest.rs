//! Benchmark manifests on disk.
//!
//! A benchmark directory holds one JSON-Lines manifest plus the image (and,
//! for inpainting, mask) files the rows point at:
//!
//! ```text
//! <dir>/manifest.jsonl
//! <dir>/images/000042.png
//! <dir>/masks/000042.png      (inpainting only)
//! ```
//!
//! Rows carry the editing prompts, provenance (original file name and the
//! hash of the pipeline configuration that produced them), and the
//! `human_approved` flag, which pipelines always write as `false`; the
//! review-import step flips it for the ids a reviewer accepted.

use std::fs;
use std::path::{Path, PathBuf};

use ldmrb_core::dataset::{DataPair, DataTriplet, PipelineConfig};
use ldmrb_core::image::{KeepMask, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imageio::{self, IoError};

/// Manifest file name inside a benchmark directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Errors from manifest reading, writing, and review import.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest: {0}")]
    Invalid(String),
}

fn parse_err(path: &Path, source: serde_json::Error) -> ManifestError {
    ManifestError::Parse {
        path: path.display().to_string(),
        source,
    }
}

/// One manifest line. `image` and `mask` are paths relative to the
/// manifest's directory; `file_name` is the source image's original name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub image_id: u64,
    pub file_name: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_category: Option<String>,
    pub prompts: Vec<String>,
    pub human_approved: bool,
    pub config_hash: String,
}

/// A loaded manifest row with its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub row: ManifestRow,
    pub image: RgbImage,
    pub mask: Option<KeepMask>,
}

/// Hash of a pipeline configuration, stored in every row for provenance.
pub fn config_hash(config: &PipelineConfig) -> String {
    let json = serde_json::to_string(config).expect("plain struct serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    format!("{:x}", hasher.finalize())
}

fn image_rel_path(image_id: u64) -> String {
    format!("images/{image_id:06}.png")
}

fn mask_rel_path(image_id: u64) -> String {
    format!("masks/{image_id:06}.png")
}

fn write_rows(dir: &Path, rows: &[ManifestRow]) -> Result<(), ManifestError> {
    let path = dir.join(MANIFEST_FILE);
    imageio::ensure_parent(&path)?;
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(|e| parse_err(&path, e))?;
        buf.push(b'\n');
    }
    fs::write(&path, buf).map_err(|e| IoError::file(&path, e))?;
    Ok(())
}

/// Writes a variation benchmark: each pair's prompts plus the matching
/// source image from `records`. Pairs lacking a source record are an error.
pub fn write_variation_manifest(
    dir: &Path,
    pairs: &[DataPair],
    records: &[ldmrb_core::dataset::CocoRecord],
    config: &PipelineConfig,
) -> Result<(), ManifestError> {
    let hash = config_hash(config);
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let record = records
            .iter()
            .find(|r| r.image_id == pair.image_id)
            .ok_or_else(|| {
                ManifestError::Invalid(format!("pair {} has no source record", pair.image_id))
            })?;
        let rel = image_rel_path(pair.image_id);
        imageio::save_rgb(&dir.join(&rel), &record.image)?;
        rows.push(ManifestRow {
            image_id: pair.image_id,
            file_name: pair.file_name.clone(),
            image: rel,
            mask: None,
            entity_category: None,
            prompts: pair.prompts.clone(),
            human_approved: pair.human_approved,
            config_hash: hash.clone(),
        });
    }
    write_rows(dir, &rows)
}

/// Writes an inpainting benchmark: each triplet's cropped image, keep-mask,
/// entity category, and prompts.
pub fn write_inpainting_manifest(
    dir: &Path,
    triplets: &[DataTriplet],
    config: &PipelineConfig,
) -> Result<(), ManifestError> {
    let hash = config_hash(config);
    let mut rows = Vec::with_capacity(triplets.len());
    for t in triplets {
        let image_rel = image_rel_path(t.image_id);
        let mask_rel = mask_rel_path(t.image_id);
        imageio::save_rgb(&dir.join(&image_rel), &t.image)?;
        imageio::save_mask(&dir.join(&mask_rel), &t.mask)?;
        rows.push(ManifestRow {
            image_id: t.image_id,
            file_name: t.file_name.clone(),
            image: image_rel,
            mask: Some(mask_rel),
            entity_category: Some(t.entity_category.clone()),
            prompts: t.prompts.clone(),
            human_approved: t.human_approved,
            config_hash: hash.clone(),
        });
    }
    write_rows(dir, &rows)
}

fn read_rows(dir: &Path) -> Result<(PathBuf, Vec<ManifestRow>), ManifestError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| IoError::file(&path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| parse_err(&path, e))?);
    }
    Ok((path, rows))
}

/// Loads a manifest and every image/mask it references, in row order.
/// Duplicate ids and rows missing a promised mask are errors.
pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestItem>, ManifestError> {
    let (_, rows) = read_rows(dir)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut items = Vec::with_capacity(rows.len());
    for row in rows {
        if !seen.insert(row.image_id) {
            return Err(ManifestError::Invalid(format!(
                "duplicate image id {}",
                row.image_id
            )));
        }
        let image = imageio::load_rgb(&dir.join(&row.image))?;
        let mask = match &row.mask {
            Some(rel) => {
                let mask = imageio::load_mask(&dir.join(rel))?;
                if mask.height() != image.height() || mask.width() != image.width() {
                    return Err(ManifestError::Invalid(format!(
                        "item {}: mask {}x{} does not match image {}x{}",
                        row.image_id,
                        mask.height(),
                        mask.width(),
                        image.height(),
                        image.width()
                    )));
                }
                Some(mask)
            }
            None => None,
        };
        items.push(ManifestItem { row, image, mask });
    }
    Ok(items)
}

/// A review verdict file: the ids a human reviewer approved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewFile {
    pub approved: Vec<u64>,
}

/// Applies a review file to a manifest in place: rows whose id appears in
/// the file get `human_approved: true`, all others `false`. Ids that match
/// no row are an error. Returns the number of approved rows.
pub fn import_review(dir: &Path, review_path: &Path) -> Result<usize, ManifestError> {
    let text = fs::read_to_string(review_path).map_err(|e| IoError::file(review_path, e))?;
    let review: ReviewFile =
        serde_json::from_str(&text).map_err(|e| parse_err(review_path, e))?;
    let (path, mut rows) = read_rows(dir)?;
    let ids: std::collections::BTreeSet<u64> = review.approved.iter().copied().collect();
    for id in &ids {
        if !rows.iter().any(|r| r.image_id == *id) {
            return Err(ManifestError::Invalid(format!(
                "review approves id {id}, which is not in the manifest"
            )));
        }
    }
    let mut approved = 0usize;
    let mut buf = Vec::new();
    for row in &mut rows {
        row.human_approved = ids.contains(&row.image_id);
        approved += usize::from(row.human_approved);
        serde_json::to_writer(&mut buf, row).map_err(|e| parse_err(&path, e))?;
        buf.push(b'\n');
    }
    fs::write(&path, buf).map_err(|e| IoError::file(&path, e))?;
    Ok(approved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic_records;

    fn sample_pairs(records: &[ldmrb_core::dataset::CocoRecord]) -> Vec<DataPair> {
        records
            .iter()
            .map(|r| DataPair {
                image_id: r.image_id,
                file_name: r.file_name.clone(),
                prompts: vec![
                    format!("restyle {} as a painting", r.image_id),
                    format!("photo {} at night", r.image_id),
                ],
                human_approved: false,
            })
            .collect()
    }

    #[test]
    fn variation_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let records = synthetic_records(3, 5);
        let pairs = sample_pairs(&records);
        let config = PipelineConfig::default();
        write_variation_manifest(dir.path(), &pairs, &records, &config).unwrap();

        let items = load_manifest(dir.path()).unwrap();
        assert_eq!(items.len(), 3);
        for (item, pair) in items.iter().zip(&pairs) {
            assert_eq!(item.row.image_id, pair.image_id);
            assert_eq!(item.row.prompts, pair.prompts);
            assert_eq!(item.row.config_hash, config_hash(&config));
            assert!(item.mask.is_none());
            assert!(!item.row.human_approved);
        }
        // Loaded pixels equal the quantised originals.
        let quantised = crate::imageio::quantize_image(&records[0].image);
        assert_eq!(items[0].image, quantised);
    }

    #[test]
    fn inpainting_manifest_round_trips_mask_and_category() {
        let dir = tempfile::tempdir().unwrap();
        let records = synthetic_records(2, 8);
        let triplets: Vec<DataTriplet> = records
            .iter()
            .map(|r| DataTriplet {
                image_id: r.image_id,
                file_name: r.file_name.clone(),
                image: r.image.clone(),
                mask: r.annotations[0].mask.clone(),
                entity_category: r.annotations[0].category.clone(),
                prompts: vec!["replace the subject".into()],
                human_approved: false,
            })
            .collect();
        write_inpainting_manifest(dir.path(), &triplets, &PipelineConfig::default()).unwrap();

        let items = load_manifest(dir.path()).unwrap();
        assert_eq!(items.len(), 2);
        for (item, t) in items.iter().zip(&triplets) {
            assert_eq!(item.mask.as_ref().unwrap(), &t.mask);
            assert_eq!(
                item.row.entity_category.as_deref(),
                Some(t.entity_category.as_str())
            );
        }
    }

    #[test]
    fn review_import_flips_only_listed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let records = synthetic_records(3, 2);
        let pairs = sample_pairs(&records);
        write_variation_manifest(dir.path(), &pairs, &records, &PipelineConfig::default())
            .unwrap();

        let review = dir.path().join("review.json");
        fs::write(&review, r#"{"approved": [1, 3]}"#).unwrap();
        assert_eq!(import_review(dir.path(), &review).unwrap(), 2);

        let items = load_manifest(dir.path()).unwrap();
        let flags: Vec<bool> = items.iter().map(|i| i.row.human_approved).collect();
        assert_eq!(flags, [true, false, true]);

        // A second import replaces the first verdicts outright.
        fs::write(&review, r#"{"approved": [2]}"#).unwrap();
        assert_eq!(import_review(dir.path(), &review).unwrap(), 1);
        let items = load_manifest(dir.path()).unwrap();
        let flags: Vec<bool> = items.iter().map(|i| i.row.human_approved).collect();
        assert_eq!(flags, [false, true, false]);
    }

    #[test]
    fn review_of_unknown_ids_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let records = synthetic_records(2, 2);
        write_variation_manifest(
            dir.path(),
            &sample_pairs(&records),
            &records,
            &PipelineConfig::default(),
        )
        .unwrap();
        let review = dir.path().join("review.json");
        fs::write(&review, r#"{"approved": [99]}"#).unwrap();
        assert!(matches!(
            import_review(dir.path(), &review),
            Err(ManifestError::Invalid(_))
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let records = synthetic_records(1, 4);
        let mut pairs = sample_pairs(&records);
        pairs.push(pairs[0].clone());
        write_variation_manifest(dir.path(), &pairs, &records, &PipelineConfig::default())
            .unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(ManifestError::Invalid(_))
        ));
    }

    #[test]
    fn config_hash_tracks_config_content() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        b.final_prompts = 4;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&PipelineConfig::default()));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
