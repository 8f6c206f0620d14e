//! PNG image files: the 8-bit quantisation boundary between in-memory
//! `f64` images and bytes on disk.
//!
//! Saving quantises each channel to the nearest of 256 levels, so a save /
//! load round trip moves every value by at most [`QUANT_SLACK`]. Loading a
//! file that was itself produced by [`save_rgb`] and saving it again is
//! byte-identical — the property resumable runs and golden manifests rely
//! on.

use std::fs;
use std::io;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use ldmrb_core::image::{ImageError, KeepMask, RgbImage};
use thiserror::Error;

/// Half an 8-bit quantisation step: the largest error introduced by saving
/// a `[0, 1]` image to an 8-bit file.
pub const QUANT_SLACK: f64 = 0.5 / 255.0;

/// Errors from image file IO.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl IoError {
    pub(crate) fn file(path: &Path, source: io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }

    fn codec(path: &Path, source: image::ImageError) -> Self {
        IoError::Codec {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Quantises a `[0, 1]` channel value to its 8-bit level.
#[inline]
pub fn quantize_channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The `[0, 1]` value an 8-bit level decodes to.
#[inline]
pub fn dequantize_channel(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Converts to an 8-bit RGB buffer, quantising each channel.
pub fn to_rgb8(image: &RgbImage) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = (image.height(), image.width());
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize_channel(v)).collect();
    ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("buffer sized from image dims")
}

/// Converts an 8-bit RGB buffer back to a `[0, 1]` image.
pub fn from_rgb8(buf: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> RgbImage {
    let (w, h) = buf.dimensions();
    let data: Vec<f64> = buf.as_raw().iter().map(|&b| dequantize_channel(b)).collect();
    RgbImage::new(h as usize, w as usize, data).expect("8-bit data is in range")
}

/// The image a save / load round trip produces, without touching disk.
pub fn quantize_image(image: &RgbImage) -> RgbImage {
    from_rgb8(&to_rgb8(image))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| IoError::file(parent, e))?;
        }
    }
    Ok(())
}

/// Saves an image as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, image: &RgbImage) -> Result<(), IoError> {
    ensure_parent(path)?;
    to_rgb8(image)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| IoError::codec(path, e))
}

/// Loads any image file the bundled codecs understand as a `[0, 1]` RGB
/// image.
pub fn load_rgb(path: &Path) -> Result<RgbImage, IoError> {
    let dynamic = image::open(path).map_err(|e| IoError::codec(path, e))?;
    Ok(from_rgb8(&dynamic.to_rgb8()))
}

/// Saves a keep-mask as a single-channel PNG: 255 = keep, 0 = drop.
pub fn save_mask(path: &Path, mask: &KeepMask) -> Result<(), IoError> {
    ensure_parent(path)?;
    let (h, w) = (mask.height(), mask.width());
    let bytes: Vec<u8> = mask.data().iter().map(|&k| if k != 0 { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("buffer sized from mask dims");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| IoError::codec(path, e))
}

/// Loads a single-channel mask PNG; values ≥ 128 count as kept.
pub fn load_mask(path: &Path) -> Result<KeepMask, IoError> {
    let dynamic = image::open(path).map_err(|e| IoError::codec(path, e))?;
    let luma = dynamic.to_luma8();
    let (w, h) = luma.dimensions();
    let data: Vec<u8> = luma.as_raw().iter().map(|&b| u8::from(b >= 128)).collect();
    Ok(KeepMask::new(h as usize, w as usize, data)?)
}
