//! Flat `f64` images and binary keep-masks.
//!
//! All pixel data lives in `[0, 1]`. Images are stored interleaved
//! (`(y * width + x) * 3 + channel`), which keeps the attack loop, the
//! metrics, and the defenses free of layout conversions.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by image and mask constructors and by shape-checked
/// pixel-domain operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageError {
    /// Two operands must share dimensions but do not.
    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    /// A pixel buffer does not hold `height * width * channels` values.
    #[error("buffer holds {got} values, expected {expected}")]
    BadBufferLength { got: usize, expected: usize },
    /// A pixel value is outside `[0, 1]` or non-finite.
    #[error("pixel value {value} at flat index {index} is outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    /// An operation needs a larger image than it was given.
    #[error("image {h}x{w} is smaller than the required {min_h}x{min_w}")]
    TooSmall {
        h: usize,
        w: usize,
        min_h: usize,
        min_w: usize,
    },
    /// A mask entry is neither 0 nor 1.
    #[error("mask value {value} at flat index {index} is not 0 or 1")]
    MaskNotBinary { index: usize, value: u8 },
    /// A keep-mask must mark at least one kept and one editable pixel.
    #[error("mask marks no {0} pixels")]
    DegenerateMask(&'static str),
    /// Width or height is zero.
    #[error("image dimensions must be positive, got {h}x{w}")]
    EmptyImage { h: usize, w: usize },
}

/// An RGB image with `f64` samples in `[0, 1]`, stored interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    /// Number of channels; the crate is RGB-only.
    pub const CHANNELS: usize = 3;

    /// Builds an image from an interleaved buffer, validating length and
    /// range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyImage { h: height, w: width });
        }
        let expected = height * width * Self::CHANNELS;
        if data.len() != expected {
            return Err(ImageError::BadBufferLength {
                got: data.len(),
                expected,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ImageError::PixelOutOfRange { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image whose samples all equal `value`.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width * Self::CHANNELS])
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample; values are
    /// validated, not clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Internal constructor for buffers already known to be valid.
    pub(crate) fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * Self::CHANNELS);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[must_use]
    pub fn height(&self) -> usize {
        self.height
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved samples, row-major, RGB.
    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Consumes the image, returning its interleaved buffer.
    #[must_use]
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[must_use]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    /// True when both images have identical dimensions.
    #[must_use]
    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Errors unless both images have identical dimensions.
    pub fn check_same_shape(&self, other: &Self) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            })
        }
    }

    /// Largest absolute per-sample difference between two same-shaped images.
    pub fn linf_distance(&self, other: &Self) -> Result<f64, ImageError> {
        self.check_same_shape(other)?;
        let mut worst = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            worst = worst.max((a - b).abs());
        }
        Ok(worst)
    }

    /// Mean squared error over all samples of two same-shaped images.
    pub fn mse(&self, other: &Self) -> Result<f64, ImageError> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Extracts one channel as a planar `height * width` buffer.
    #[must_use]
    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        assert!(c < Self::CHANNELS);
        let mut plane = Vec::with_capacity(self.height * self.width);
        for px in 0..self.height * self.width {
            plane.push(self.data[px * Self::CHANNELS + c]);
        }
        plane
    }

    /// Converts to planar CHW layout (`[c][y][x]`).
    #[must_use]
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut planar = vec![0.0; hw * Self::CHANNELS];
        for px in 0..hw {
            for c in 0..Self::CHANNELS {
                planar[c * hw + px] = self.data[px * Self::CHANNELS + c];
            }
        }
        planar
    }

    /// Rebuilds an interleaved image from a planar CHW buffer, clamping into
    /// `[0, 1]`.
    pub(crate) fn from_planar_clamped(height: usize, width: usize, planar: &[f64]) -> Self {
        let hw = height * width;
        debug_assert_eq!(planar.len(), hw * Self::CHANNELS);
        let mut data = vec![0.0; hw * Self::CHANNELS];
        for px in 0..hw {
            for c in 0..Self::CHANNELS {
                data[px * Self::CHANNELS + c] = planar[c * hw + px].clamp(0.0, 1.0);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Bilinear resize with half-pixel sample centers. Resizing to the
    /// original dimensions reproduces the input exactly.
    #[must_use]
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        assert!(out_h > 0 && out_w > 0, "resize target must be positive");
        let scale_y = self.height as f64 / out_h as f64;
        let scale_x = self.width as f64 / out_w as f64;
        let mut data = Vec::with_capacity(out_h * out_w * Self::CHANNELS);
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                for c in 0..Self::CHANNELS {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// Crops the window with top-left corner `(top, left)` and size
    /// `side x side`; the window must lie inside the image.
    pub fn crop(&self, top: usize, left: usize, side_h: usize, side_w: usize) -> Result<Self, ImageError> {
        if top + side_h > self.height || left + side_w > self.width {
            return Err(ImageError::TooSmall {
                h: self.height,
                w: self.width,
                min_h: top + side_h,
                min_w: left + side_w,
            });
        }
        let mut data = Vec::with_capacity(side_h * side_w * Self::CHANNELS);
        for y in top..top + side_h {
            for x in left..left + side_w {
                for c in 0..Self::CHANNELS {
                    data.push(self.get(y, x, c));
                }
            }
        }
        Ok(Self {
            height: side_h,
            width: side_w,
            data,
        })
    }
}

/// A raw per-pixel gradient with the same interleaved layout as [`RgbImage`],
/// but without the `[0, 1]` range invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGradient {
    pub height: usize,
    pub width: usize,
    /// Interleaved, row-major, RGB; `height * width * 3` values.
    pub data: Vec<f64>,
}

impl PixelGradient {
    /// An all-zero gradient of the given shape.
    #[must_use]
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * RgbImage::CHANNELS],
        }
    }

    #[must_use]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * RgbImage::CHANNELS + c]
    }

    /// True when every component is finite.
    #[must_use]
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A binary mask: 1 marks pixels preserved by inpainting, 0 marks pixels the
/// editor may change. A valid mask contains at least one of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl KeepMask {
    /// Builds a mask from row-major 0/1 entries, requiring at least one kept
    /// and one editable pixel.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyImage { h: height, w: width });
        }
        let expected = height * width;
        if data.len() != expected {
            return Err(ImageError::BadBufferLength {
                got: data.len(),
                expected,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if value > 1 {
                return Err(ImageError::MaskNotBinary { index, value });
            }
        }
        if !data.iter().any(|&v| v == 1) {
            return Err(ImageError::DegenerateMask("kept"));
        }
        if !data.iter().any(|&v| v == 0) {
            return Err(ImageError::DegenerateMask("editable"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a mask by evaluating a predicate at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut keep: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(keep(y, x)));
            }
        }
        Self::new(height, width, data)
    }

    #[must_use]
    pub fn height(&self) -> usize {
        self.height
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major 0/1 entries.
    #[must_use]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[must_use]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Number of kept (1) pixels.
    #[must_use]
    pub fn kept_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Tight bounding box of the kept pixels as `(top, left, height, width)`.
    #[must_use]
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut min_y = usize::MAX;
        let mut min_x = usize::MAX;
        let mut max_y = 0usize;
        let mut max_x = 0usize;
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    any = true;
                    min_y = min_y.min(y);
                    min_x = min_x.min(x);
                    max_y = max_y.max(y);
                    max_x = max_x.max(x);
                }
            }
        }
        any.then(|| (min_y, min_x, max_y - min_y + 1, max_x - min_x + 1))
    }

    /// Nearest-neighbour resize with half-pixel sample centers. May fail if
    /// downsampling erases one of the two mask classes.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self, ImageError> {
        assert!(out_h > 0 && out_w > 0, "resize target must be positive");
        let scale_y = self.height as f64 / out_h as f64;
        let scale_x = self.width as f64 / out_w as f64;
        let mut data = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = (((oy as f64 + 0.5) * scale_y - 0.5).round().max(0.0) as usize)
                .min(self.height - 1);
            for ox in 0..out_w {
                let sx = (((ox as f64 + 0.5) * scale_x - 0.5).round().max(0.0) as usize)
                    .min(self.width - 1);
                data.push(self.get(sy, sx));
            }
        }
        Self::new(out_h, out_w, data)
    }

    /// Crops a window that must both lie inside the mask and retain at least
    /// one kept and one editable pixel.
    pub fn crop(&self, top: usize, left: usize, side_h: usize, side_w: usize) -> Result<Self, ImageError> {
        if top + side_h > self.height || left + side_w > self.width {
            return Err(ImageError::TooSmall {
                h: self.height,
                w: self.width,
                min_h: top + side_h,
                min_w: left + side_w,
            });
        }
        let mut data = Vec::with_capacity(side_h * side_w);
        for y in top..top + side_h {
            for x in left..left + side_w {
                data.push(self.get(y, x));
            }
        }
        Self::new(side_h, side_w, data)
    }

    /// Pixelwise union (logical OR) of two same-shaped masks.
    pub fn union(&self, other: &Self) -> Result<Self, ImageError> {
        if self.height != other.height || self.width != other.width {
            return Err(ImageError::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        Self::new(self.height, self.width, data)
    }
}
