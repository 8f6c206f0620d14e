//! Captioned, instance-annotated corpora: a COCO-style loader and a
//! deterministic synthetic generator.
//!
//! The loader consumes the standard two-file layout — an instances file
//! (images, categories, annotations with polygon or RLE segmentation) and a
//! captions file — plus an image directory, and produces the in-memory
//! records the dataset pipelines rank and crop. Segmentations rasterise at
//! pixel centers with even-odd filling; RLE counts run column-major, in
//! both the raw integer-array and the compressed-string form.
//!
//! The generator writes a small corpus of gradient backgrounds with
//! rectangular entities whose boxes, areas, and masks are exact by
//! construction, cycling every segmentation encoding so a load of what it
//! wrote exercises each decode path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ldmrb_core::dataset::{Annotation, BBox, CocoRecord};
use ldmrb_core::image::{ImageError, KeepMask, RgbImage};
use ldmrb_core::rng::{derive_seed, seeded_rng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{self, IoError};

/// Errors from corpus loading and generation.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("corpus schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn parse_err(path: &Path, source: serde_json::Error) -> CorpusError {
    CorpusError::Parse {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Annotation file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryEntry {
    id: u64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceEntry {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    area: f64,
    segmentation: Segmentation,
}

/// A segmentation in any of the three transport encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// One or more `[x0, y0, x1, y1, ...]` rings, filled even-odd and
    /// unioned together.
    Polygons(Vec<Vec<f64>>),
    /// Column-major run lengths, starting with the zero run.
    Rle(RleSegmentation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleSegmentation {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u64>),
    Compressed(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct InstancesFile {
    images: Vec<ImageEntry>,
    annotations: Vec<InstanceEntry>,
    categories: Vec<CategoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionEntry {
    id: u64,
    image_id: u64,
    caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionsFile {
    annotations: Vec<CaptionEntry>,
}

// ---------------------------------------------------------------------------
// Rasterisation
// ---------------------------------------------------------------------------

/// Fills one polygon ring with the even-odd rule, sampling pixel centers.
pub fn rasterize_polygon(poly: &[f64], h: usize, w: usize) -> Result<KeepMask, CorpusError> {
    if poly.len() < 6 || poly.len() % 2 != 0 {
        return Err(CorpusError::Schema(format!(
            "polygon needs an even coordinate count of at least 6, got {}",
            poly.len()
        )));
    }
    let pts: Vec<(f64, f64)> = poly.chunks(2).map(|c| (c[0], c[1])).collect();
    let mut data = vec![0u8; h * w];
    let mut crossings: Vec<f64> = Vec::new();
    for y in 0..h {
        let cy = y as f64 + 0.5;
        crossings.clear();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= cy && cy < y1) || (y1 <= cy && cy < y0) {
                crossings.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // Pixels whose center x + 0.5 lies in [xa, xb).
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(w);
            for x in start..end {
                data[y * w + x] = 1;
            }
        }
    }
    Ok(KeepMask::new(h, w, data)?)
}

/// Expands column-major run lengths (zero run first) into a mask.
pub fn rle_counts_to_mask(counts: &[u64], h: usize, w: usize) -> Result<KeepMask, CorpusError> {
    let total: u64 = counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(CorpusError::Schema(format!(
            "rle counts cover {total} pixels, mask is {h}x{w}"
        )));
    }
    let mut data = vec![0u8; h * w];
    let mut pos = 0usize;
    let mut value = 0u8;
    for &count in counts {
        for _ in 0..count {
            // Column-major: position p is pixel (p % h, p / h).
            let (y, x) = (pos % h, pos / h);
            data[y * w + x] = value;
            pos += 1;
        }
        value ^= 1;
    }
    Ok(KeepMask::new(h, w, data)?)
}

/// Collapses a mask into column-major run lengths, zero run first.
pub fn mask_to_rle_counts(mask: &KeepMask) -> Vec<u64> {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

/// Decodes the compressed run-length string form.
///
/// Each count is a variable-length little-endian base-32 integer carried in
/// printable characters (offset 48, bit 0x20 continues, bit 0x10 of the
/// last group signs); counts from index 3 on are deltas against the count
/// two places back.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>, CorpusError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k: u32 = 0;
        let mut more = true;
        while more {
            if p >= bytes.len() {
                return Err(CorpusError::Schema("truncated rle string".into()));
            }
            let c = i64::from(bytes[p]) - 48;
            if !(0..64).contains(&c) {
                return Err(CorpusError::Schema(format!(
                    "rle string byte {} out of range",
                    bytes[p]
                )));
            }
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && (c & 0x10) != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| {
            u64::try_from(c).map_err(|_| CorpusError::Schema(format!("negative rle count {c}")))
        })
        .collect()
}

/// Encodes run lengths into the compressed string form
/// ([`decode_rle_string`] inverts it).
pub fn encode_rle_string(counts: &[u64]) -> String {
    let mut out = Vec::new();
    for (i, &count) in counts.iter().enumerate() {
        let mut x = count as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        let mut more = true;
        while more {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push(c + 48);
        }
    }
    String::from_utf8(out).expect("bytes 48..112 are ascii")
}

/// Rasterises any segmentation encoding at the given image size.
pub fn rasterize_segmentation(
    seg: &Segmentation,
    h: usize,
    w: usize,
) -> Result<KeepMask, CorpusError> {
    match seg {
        Segmentation::Polygons(rings) => {
            if rings.is_empty() {
                return Err(CorpusError::Schema("empty polygon list".into()));
            }
            let mut union = rasterize_polygon(&rings[0], h, w)?;
            for ring in &rings[1..] {
                union = union.union(&rasterize_polygon(ring, h, w)?)?;
            }
            Ok(union)
        }
        Segmentation::Rle(rle) => {
            let [rh, rw] = rle.size;
            if rh != h || rw != w {
                return Err(CorpusError::Schema(format!(
                    "rle size {rh}x{rw} does not match image {h}x{w}"
                )));
            }
            match &rle.counts {
                RleCounts::Raw(counts) => rle_counts_to_mask(counts, h, w),
                RleCounts::Compressed(s) => rle_counts_to_mask(&decode_rle_string(s)?, h, w),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// File locations of one corpus on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub instances: PathBuf,
    pub captions: PathBuf,
    pub images_dir: PathBuf,
}

impl CorpusPaths {
    /// The standard layout under one directory: `instances.json`,
    /// `captions.json`, `images/`.
    pub fn under(dir: &Path) -> Self {
        Self {
            instances: dir.join("instances.json"),
            captions: dir.join("captions.json"),
            images_dir: dir.join("images"),
        }
    }
}

/// Loads a corpus: instance and caption files plus the image directory.
/// Records come back sorted by image id; captions and annotations keep
/// file order within each record.
pub fn load_coco_corpus(paths: &CorpusPaths) -> Result<Vec<CocoRecord>, CorpusError> {
    let instances_text = fs::read_to_string(&paths.instances)
        .map_err(|e| IoError::file(&paths.instances, e))?;
    let instances: InstancesFile =
        serde_json::from_str(&instances_text).map_err(|e| parse_err(&paths.instances, e))?;
    let captions_text =
        fs::read_to_string(&paths.captions).map_err(|e| IoError::file(&paths.captions, e))?;
    let captions: CaptionsFile =
        serde_json::from_str(&captions_text).map_err(|e| parse_err(&paths.captions, e))?;

    let categories: BTreeMap<u64, String> = instances
        .categories
        .into_iter()
        .map(|c| (c.id, c.name))
        .collect();

    let mut captions_by_image: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for entry in captions.annotations {
        captions_by_image
            .entry(entry.image_id)
            .or_default()
            .push(entry.caption);
    }

    let mut annotations_by_image: BTreeMap<u64, Vec<InstanceEntry>> = BTreeMap::new();
    for entry in instances.annotations {
        annotations_by_image
            .entry(entry.image_id)
            .or_default()
            .push(entry);
    }

    let mut images = instances.images;
    images.sort_by_key(|img| img.id);

    let mut records = Vec::with_capacity(images.len());
    for img in images {
        let path = paths.images_dir.join(&img.file_name);
        let image = imageio::load_rgb(&path)?;
        if image.height() != img.height || image.width() != img.width {
            return Err(CorpusError::Schema(format!(
                "image {} is {}x{}, annotation file says {}x{}",
                img.file_name,
                image.height(),
                image.width(),
                img.height,
                img.width
            )));
        }
        let mut annotations = Vec::new();
        for entry in annotations_by_image.remove(&img.id).unwrap_or_default() {
            let category = categories
                .get(&entry.category_id)
                .ok_or_else(|| {
                    CorpusError::Schema(format!(
                        "annotation {} names unknown category {}",
                        entry.id, entry.category_id
                    ))
                })?
                .clone();
            let mask = rasterize_segmentation(&entry.segmentation, img.height, img.width)?;
            let [x, y, w, h] = entry.bbox;
            annotations.push(Annotation {
                category,
                bbox: BBox { x, y, w, h },
                area: entry.area,
                mask,
            });
        }
        records.push(CocoRecord {
            image_id: img.id,
            file_name: img.file_name,
            image,
            captions: captions_by_image.remove(&img.id).unwrap_or_default(),
            annotations,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Side length of generated images (divisible by the builtin editors'
/// downsampling factor).
pub const SYNTHETIC_SIDE: usize = 48;

const CATEGORIES: [&str; 4] = ["dog", "cat", "car", "pizza"];

const CAPTION_TEMPLATES: [&str; 6] = [
    "a {} resting in a sunny field",
    "a photo of a {} near the old bridge",
    "the {} waits beside a quiet road",
    "a {} enjoying the afternoon light",
    "a close view of a {} outdoors",
    "a {} by the water at dusk",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SegMode {
    Polygon,
    RawRle,
    CompressedRle,
}

struct GeneratedRecord {
    record: CocoRecord,
    seg_modes: Vec<SegMode>,
}

fn rect_mask(h: usize, w: usize, rect: (usize, usize, usize, usize)) -> KeepMask {
    let (ry, rx, rh, rw) = rect;
    KeepMask::from_fn(h, w, |y, x| y >= ry && y < ry + rh && x >= rx && x < rx + rw)
        .expect("positive dims")
}

/// Generates the corpus content shared by [`synthetic_records`] and
/// [`synthesize_corpus`].
fn generate(n: usize, seed: u64) -> Vec<GeneratedRecord> {
    let side = SYNTHETIC_SIDE;
    let mut rng = seeded_rng(derive_seed(seed, "synthetic-corpus"));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let image_id = (i + 1) as u64;
        // Smooth two-color diagonal gradient background.
        let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let denom = (2 * side - 2) as f64;
        let mut image = RgbImage::from_fn(side, side, |y, x, ch| {
            let t = (y + x) as f64 / denom;
            c0[ch] * (1.0 - t) + c1[ch] * t
        })
        .expect("positive dims");

        // Entities occupy distinct quadrants so their masks never overlap.
        let entity_count = rng.gen_range(2..=3usize);
        let mut quadrants = [0usize, 1, 2, 3];
        quadrants.shuffle(&mut rng);
        let half = side / 2;

        let mut annotations = Vec::new();
        let mut seg_modes = Vec::new();
        let mut first_category = 0usize;
        for j in 0..entity_count {
            let q = quadrants[j];
            let (cell_y, cell_x) = ((q / 2) * half, (q % 2) * half);
            let rw = rng.gen_range(8..=16usize);
            let rh = rng.gen_range(8..=16usize);
            let rx = cell_x + rng.gen_range(2..=half - 2 - rw);
            let ry = cell_y + rng.gen_range(2..=half - 2 - rh);
            let category_idx = if i % 3 == 0 && j == 1 {
                // Every third image repeats the first entity's category, so
                // same-category mask unions occur throughout the corpus.
                first_category
            } else {
                rng.gen_range(0..CATEGORIES.len())
            };
            if j == 0 {
                first_category = category_idx;
            }
            let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let mut data = image.into_data();
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    for (ch, &c) in color.iter().enumerate() {
                        data[(y * side + x) * 3 + ch] = c;
                    }
                }
            }
            image = RgbImage::new(side, side, data).expect("in range");

            annotations.push(Annotation {
                category: CATEGORIES[category_idx].to_string(),
                bbox: BBox {
                    x: rx as f64,
                    y: ry as f64,
                    w: rw as f64,
                    h: rh as f64,
                },
                area: (rw * rh) as f64,
                mask: rect_mask(side, side, (ry, rx, rh, rw)),
            });
            seg_modes.push(match j % 3 {
                0 => SegMode::Polygon,
                1 => SegMode::RawRle,
                _ => SegMode::CompressedRle,
            });
        }

        let caption_count = rng.gen_range(2..=3usize);
        let mut template_ids: Vec<usize> = (0..CAPTION_TEMPLATES.len()).collect();
        template_ids.shuffle(&mut rng);
        let captions = template_ids
            .into_iter()
            .take(caption_count)
            .map(|t| CAPTION_TEMPLATES[t].replace("{}", CATEGORIES[first_category]))
            .collect();

        out.push(GeneratedRecord {
            record: CocoRecord {
                image_id,
                file_name: format!("{image_id:06}.png"),
                image,
                captions,
                annotations,
            },
            seg_modes,
        });
    }
    out
}

/// The synthetic corpus as in-memory records, without touching disk.
/// [`synthesize_corpus`] writes exactly these records.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<CocoRecord> {
    generate(n, seed).into_iter().map(|g| g.record).collect()
}

/// Writes an `n`-image synthetic corpus under `dir` in the standard layout
/// and returns its paths. Deterministic: the same `n` and `seed` produce
/// byte-identical files.
pub fn synthesize_corpus(dir: &Path, n: usize, seed: u64) -> Result<CorpusPaths, CorpusError> {
    let paths = CorpusPaths::under(dir);
    fs::create_dir_all(&paths.images_dir).map_err(|e| IoError::file(&paths.images_dir, e))?;

    let generated = generate(n, seed);
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut caption_entries = Vec::new();
    let mut annotation_id = 0u64;
    let mut caption_id = 0u64;
    for g in &generated {
        let record = &g.record;
        let (h, w) = (record.image.height(), record.image.width());
        // The stored image is already 8-bit exact? No: quantisation happens
        // here, so the in-memory record must match what a loader reads back.
        imageio::save_rgb(&paths.images_dir.join(&record.file_name), &record.image)?;
        images.push(ImageEntry {
            id: record.image_id,
            file_name: record.file_name.clone(),
            height: h,
            width: w,
        });
        for (ann, &mode) in record.annotations.iter().zip(&g.seg_modes) {
            annotation_id += 1;
            let category_id = CATEGORIES
                .iter()
                .position(|c| *c == ann.category)
                .expect("generated categories are known") as u64
                + 1;
            let segmentation = match mode {
                SegMode::Polygon => {
                    let BBox { x, y, w, h } = ann.bbox;
                    Segmentation::Polygons(vec![vec![x, y, x + w, y, x + w, y + h, x, y + h]])
                }
                SegMode::RawRle => Segmentation::Rle(RleSegmentation {
                    size: [ann.mask.height(), ann.mask.width()],
                    counts: RleCounts::Raw(mask_to_rle_counts(&ann.mask)),
                }),
                SegMode::CompressedRle => Segmentation::Rle(RleSegmentation {
                    size: [ann.mask.height(), ann.mask.width()],
                    counts: RleCounts::Compressed(encode_rle_string(&mask_to_rle_counts(
                        &ann.mask,
                    ))),
                }),
            };
            annotations.push(InstanceEntry {
                id: annotation_id,
                image_id: record.image_id,
                category_id,
                bbox: [ann.bbox.x, ann.bbox.y, ann.bbox.w, ann.bbox.h],
                area: ann.area,
                segmentation,
            });
        }
        for caption in &record.captions {
            caption_id += 1;
            caption_entries.push(CaptionEntry {
                id: caption_id,
                image_id: record.image_id,
                caption: caption.clone(),
            });
        }
    }

    let categories = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, name)| CategoryEntry {
            id: i as u64 + 1,
            name: (*name).to_string(),
        })
        .collect();

    let instances = InstancesFile {
        images,
        annotations,
        categories,
    };
    let mut instances_json =
        serde_json::to_string_pretty(&instances).expect("serializable structs");
    instances_json.push('\n');
    fs::write(&paths.instances, instances_json).map_err(|e| IoError::file(&paths.instances, e))?;

    let captions = CaptionsFile {
        annotations: caption_entries,
    };
    let mut captions_json = serde_json::to_string_pretty(&captions).expect("serializable structs");
    captions_json.push('\n');
    fs::write(&paths.captions, captions_json).map_err(|e| IoError::file(&paths.captions, e))?;

    Ok(paths)
}
