//! A real lossy JPEG round trip, plugged into the defense layer's codec
//! seam.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use ldmrb_core::defense::{DefenseError, JpegCodec};
use ldmrb_core::image::RgbImage;

use crate::imageio::{from_rgb8, to_rgb8};

/// JPEG encode/decode through the `image` crate. Deterministic: the same
/// pixels and quality always produce the same bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageJpegCodec;

impl JpegCodec for ImageJpegCodec {
    fn round_trip(&self, image: &RgbImage, quality: u8) -> Result<RgbImage, DefenseError> {
        let rgb = to_rgb8(image);
        let mut bytes = Vec::new();
        let encoder = JpegEncoder::new_with_quality(Cursor::new(&mut bytes), quality);
        rgb.write_with_encoder(encoder)
            .map_err(|e| DefenseError::CodecFailure(format!("jpeg encode: {e}")))?;
        let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)
            .map_err(|e| DefenseError::CodecFailure(format!("jpeg decode: {e}")))?;
        Ok(from_rgb8(&decoded.to_rgb8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldmrb_core::rng::seeded_rng;
    use rand::Rng;

    fn textured(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = seeded_rng(seed);
        let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        RgbImage::new(h, w, data).unwrap()
    }

    #[test]
    fn round_trip_preserves_dims_and_range() {
        let image = textured(24, 40, 1);
        let out = ImageJpegCodec.round_trip(&image, 75).unwrap();
        assert!(out.same_shape(&image));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn round_trip_is_deterministic() {
        let image = textured(16, 16, 2);
        let a = ImageJpegCodec.round_trip(&image, 60).unwrap();
        let b = ImageJpegCodec.round_trip(&image, 60).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn lower_quality_loses_more() {
        let image = textured(32, 32, 3);
        let hi = ImageJpegCodec.round_trip(&image, 95).unwrap();
        let lo = ImageJpegCodec.round_trip(&image, 10).unwrap();
        let err_hi = image.mse(&hi).unwrap();
        let err_lo = image.mse(&lo).unwrap();
        assert!(err_lo > err_hi, "q10 mse {err_lo} should exceed q95 mse {err_hi}");
        assert!(err_lo > 0.0, "random texture cannot survive q10 exactly");
    }

    #[test]
    fn constant_images_survive_nearly_unchanged() {
        let image = RgbImage::constant(32, 32, 0.5).unwrap();
        let out = ImageJpegCodec.round_trip(&image, 75).unwrap();
        assert!(image.linf_distance(&out).unwrap() < 0.05);
    }
}
