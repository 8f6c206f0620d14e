//! Input-side purification defenses.
//!
//! Each defense maps an image to an image of identical dimensions and range,
//! is deterministic for a given seed, and is applied to adversarial inputs
//! before re-running the editing pipeline. Three transforms are provided:
//! random resize-and-pad, JPEG re-encoding through a pluggable codec, and
//! additive Gaussian noise.

use alloc::format;
#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, RgbImage};
use crate::rng::{derive_seed, seeded_rng};

/// Default maximum canvas expansion of the resize-and-pad defense.
pub const DEFAULT_MAX_EXPAND: f64 = 0.1;
/// Default JPEG quality.
pub const DEFAULT_JPEG_QUALITY: u8 = 75;
/// Default Gaussian-noise standard deviation.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

/// A defense selection plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseSpec {
    /// Randomly rescale (preserving aspect), zero-pad at a random offset
    /// into an enlarged canvas, and resize back to the original dimensions.
    ResizePad { max_expand: f64 },
    /// Re-encode through a lossy JPEG round trip at the given quality.
    Jpeg { quality: u8 },
    /// Add zero-mean Gaussian noise and clamp back into `[0, 1]`.
    GaussianNoise { sigma: f64 },
}

impl DefenseSpec {
    /// Resize-and-pad with the default expansion.
    #[must_use]
    pub fn resize_pad() -> Self {
        DefenseSpec::ResizePad {
            max_expand: DEFAULT_MAX_EXPAND,
        }
    }

    /// JPEG round trip at the default quality.
    #[must_use]
    pub fn jpeg() -> Self {
        DefenseSpec::Jpeg {
            quality: DEFAULT_JPEG_QUALITY,
        }
    }

    /// Gaussian noise at the default standard deviation.
    #[must_use]
    pub fn gaussian_noise() -> Self {
        DefenseSpec::GaussianNoise {
            sigma: DEFAULT_NOISE_SIGMA,
        }
    }

    /// Stable label used in reports and cache paths.
    #[must_use]
    pub fn label(&self) -> &'static str {
        match self {
            DefenseSpec::ResizePad { .. } => "resize-pad",
            DefenseSpec::Jpeg { .. } => "jpeg",
            DefenseSpec::GaussianNoise { .. } => "gaussian-noise",
        }
    }

    /// Validates parameter ranges.
    pub fn validate(&self) -> Result<(), DefenseError> {
        match *self {
            DefenseSpec::ResizePad { max_expand } => {
                if !(0.0..=1.0).contains(&max_expand) {
                    return Err(DefenseError::InvalidSpec(format!(
                        "max_expand {max_expand} outside [0, 1]"
                    )));
                }
            }
            DefenseSpec::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(DefenseError::InvalidSpec(format!(
                        "quality {quality} outside 1..=100"
                    )));
                }
            }
            DefenseSpec::GaussianNoise { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(DefenseError::InvalidSpec(format!(
                        "sigma {sigma} must be finite and non-negative"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Errors from defense application.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DefenseError {
    #[error("invalid defense spec: {0}")]
    InvalidSpec(String),
    /// The spec needs a JPEG codec but none was supplied.
    #[error("JPEG defense requires a codec")]
    CodecUnavailable,
    /// The codec failed to encode or decode.
    #[error("JPEG codec failure: {0}")]
    CodecFailure(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// A lossy JPEG round trip: encode at `quality`, decode back. The codec is
/// responsible for 8-bit quantisation; implementations must preserve
/// dimensions. The pixel crates that provide actual codecs live outside this
/// crate; tests use a quantising stub.
pub trait JpegCodec {
    fn round_trip(&self, image: &RgbImage, quality: u8) -> Result<RgbImage, DefenseError>;
}

/// The geometry drawn for one resize-and-pad application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpGeometry {
    /// Continuous rescale factor in `[1, 1 + max_expand]`.
    pub scale: f64,
    pub resized_h: usize,
    pub resized_w: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Draws resize-and-pad geometry for an `h x w` image: a continuous scale
/// uniform in `[1, 1 + max_expand]`, then uniform pad offsets positioning
/// the rescaled image inside the fully expanded canvas.
///
/// Exposed separately so statistical tests can audit the distribution.
pub fn draw_resize_geometry(
    h: usize,
    w: usize,
    max_expand: f64,
    rng: &mut impl Rng,
) -> RpGeometry {
    let canvas_h = (h as f64 * (1.0 + max_expand)).ceil() as usize;
    let canvas_w = (w as f64 * (1.0 + max_expand)).ceil() as usize;
    let scale = if max_expand > 0.0 {
        rng.gen_range(1.0..=1.0 + max_expand)
    } else {
        1.0
    };
    let resized_h = ((h as f64 * scale).round() as usize).clamp(h, canvas_h);
    let resized_w = ((w as f64 * scale).round() as usize).clamp(w, canvas_w);
    let pad_top = if canvas_h > resized_h {
        rng.gen_range(0..=canvas_h - resized_h)
    } else {
        0
    };
    let pad_left = if canvas_w > resized_w {
        rng.gen_range(0..=canvas_w - resized_w)
    } else {
        0
    };
    RpGeometry {
        scale,
        resized_h,
        resized_w,
        canvas_h,
        canvas_w,
        pad_top,
        pad_left,
    }
}

/// Applies resize-and-pad with explicit geometry (the deterministic core of
/// the defense).
pub fn resize_pad_with_geometry(image: &RgbImage, geom: &RpGeometry) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    if geom.canvas_h == h && geom.canvas_w == w {
        // Degenerate expansion: a pure resize round trip.
        return image.resize_bilinear(h, w);
    }
    let resized = image.resize_bilinear(geom.resized_h, geom.resized_w);
    let mut canvas = vec![0.0; geom.canvas_h * geom.canvas_w * RgbImage::CHANNELS];
    for y in 0..geom.resized_h {
        for x in 0..geom.resized_w {
            for c in 0..RgbImage::CHANNELS {
                let dst = ((geom.pad_top + y) * geom.canvas_w + geom.pad_left + x)
                    * RgbImage::CHANNELS
                    + c;
                canvas[dst] = resized.get(y, x, c);
            }
        }
    }
    let canvas = RgbImage::new(geom.canvas_h, geom.canvas_w, canvas).expect("canvas is in range");
    canvas.resize_bilinear(h, w)
}

/// Applies a defense. `codec` is only consulted for the JPEG defense.
///
/// Output dimensions and range always equal the input's, and results are
/// deterministic in `seed`.
pub fn apply_defense(
    image: &RgbImage,
    spec: &DefenseSpec,
    seed: u64,
    codec: Option<&dyn JpegCodec>,
) -> Result<RgbImage, DefenseError> {
    spec.validate()?;
    match *spec {
        DefenseSpec::ResizePad { max_expand } => {
            let mut rng = seeded_rng(derive_seed(seed, "defense-resize-pad"));
            let geom = draw_resize_geometry(image.height(), image.width(), max_expand, &mut rng);
            Ok(resize_pad_with_geometry(image, &geom))
        }
        DefenseSpec::Jpeg { quality } => {
            let codec = codec.ok_or(DefenseError::CodecUnavailable)?;
            let out = codec.round_trip(image, quality)?;
            if !out.same_shape(image) {
                return Err(DefenseError::CodecFailure(format!(
                    "codec changed dimensions: {}x{} -> {}x{}",
                    image.height(),
                    image.width(),
                    out.height(),
                    out.width()
                )));
            }
            Ok(out)
        }
        DefenseSpec::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let mut rng = seeded_rng(derive_seed(seed, "defense-gaussian-noise"));
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let data: Vec<f64> = image
                .data()
                .iter()
                .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            Ok(RgbImage::new(image.height(), image.width(), data).expect("clamped"))
        }
    }
}

/// A quantising stand-in codec: 8-bit round trip with no frequency loss.
/// Usable wherever a real codec is unavailable (tests, `no_std` targets).
#[derive(Debug, Clone, Copy, Default)]
pub struct QuantizingCodec;

impl JpegCodec for QuantizingCodec {
    fn round_trip(&self, image: &RgbImage, _quality: u8) -> Result<RgbImage, DefenseError> {
        let data: Vec<f64> = image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() / 255.0)
            .collect();
        Ok(RgbImage::new(image.height(), image.width(), data).expect("quantised range"))
    }
}
