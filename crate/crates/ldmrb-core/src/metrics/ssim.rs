//! Structural similarity (SSIM) and its multi-scale extension.
//!
//! SSIM follows the classic formulation: an 11x11 Gaussian window with
//! sigma 1.5 slides over each channel (valid positions only), local moments
//! give per-window luminance and contrast/structure terms, and the score is
//! the map mean averaged over channels. The multi-scale variant evaluates
//! the contrast/structure term on a five-level 2x2 average-pooled pyramid
//! and the luminance term at the coarsest level, combining them with the
//! published exponents (renormalised when the image supports fewer levels).

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;

use super::MetricsError;
use crate::image::RgbImage;

/// Window side length.
pub const SSIM_WINDOW: usize = 11;
/// Window Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;
/// Luminance stabiliser constant factor (`K1`).
pub const SSIM_K1: f64 = 0.01;
/// Contrast stabiliser constant factor (`K2`).
pub const SSIM_K2: f64 = 0.03;
/// Per-scale exponents of the multi-scale score, finest to coarsest.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const C1: f64 = SSIM_K1 * SSIM_K1; // dynamic range L = 1
const C2: f64 = SSIM_K2 * SSIM_K2;

/// Normalised 1-D Gaussian window of length [`SSIM_WINDOW`].
#[must_use]
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = Float::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn product(a: &Plane, b: &Plane) -> Plane {
        Plane {
            h: a.h,
            w: a.w,
            data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
        }
    }

    /// Valid-mode separable Gaussian filtering; output shrinks by
    /// `SSIM_WINDOW - 1` per axis.
    fn window_means(&self, kernel: &[f64; SSIM_WINDOW]) -> Plane {
        let oh = self.h - SSIM_WINDOW + 1;
        let ow = self.w - SSIM_WINDOW + 1;
        // Horizontal pass.
        let mut horiz = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * self.data[y * self.w + x + i];
                }
                horiz[y * ow + x] = acc;
            }
        }
        // Vertical pass.
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * horiz[(y + i) * ow + x];
                }
                out[y * ow + x] = acc;
            }
        }
        Plane {
            h: oh,
            w: ow,
            data: out,
        }
    }
}

fn channel_plane(img: &RgbImage, c: usize) -> Plane {
    Plane {
        h: img.height(),
        w: img.width(),
        data: img.channel_plane(c),
    }
}

/// Mean luminance (`l`), contrast/structure (`cs`), and full SSIM map values
/// for one image pair, averaged over channels and window positions.
fn components(a: &RgbImage, b: &RgbImage) -> Result<(f64, f64, f64), MetricsError> {
    a.check_same_shape(b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            h: a.height(),
            w: a.width(),
            min: SSIM_WINDOW,
        });
    }
    let kernel = gaussian_window();
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut count = 0usize;
    for c in 0..RgbImage::CHANNELS {
        let pa = channel_plane(a, c);
        let pb = channel_plane(b, c);
        let mu_a = pa.window_means(&kernel);
        let mu_b = pb.window_means(&kernel);
        let mu_aa = Plane::product(&pa, &pa).window_means(&kernel);
        let mu_bb = Plane::product(&pb, &pb).window_means(&kernel);
        let mu_ab = Plane::product(&pa, &pb).window_means(&kernel);
        for i in 0..mu_a.data.len() {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let var_a = mu_aa.data[i] - ma * ma;
            let var_b = mu_bb.data[i] - mb * mb;
            let cov = mu_ab.data[i] - ma * mb;
            let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
            let cs = (2.0 * cov + C2) / (var_a + var_b + C2);
            l_sum += l;
            cs_sum += cs;
            ssim_sum += l * cs;
        }
        count += mu_a.data.len();
    }
    let n = count as f64;
    Ok((l_sum / n, cs_sum / n, ssim_sum / n))
}

/// Single-scale SSIM of two same-shaped images; 1 exactly when they are
/// identical.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    components(a, b).map(|(_, _, s)| s)
}

/// 2x2 average pooling; trailing odd rows/columns are dropped.
fn halve(img: &RgbImage) -> RgbImage {
    let oh = img.height() / 2;
    let ow = img.width() / 2;
    let mut data = Vec::with_capacity(oh * ow * RgbImage::CHANNELS);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..RgbImage::CHANNELS {
                let sum = img.get(2 * y, 2 * x, c)
                    + img.get(2 * y, 2 * x + 1, c)
                    + img.get(2 * y + 1, 2 * x, c)
                    + img.get(2 * y + 1, 2 * x + 1, c);
                data.push(sum / 4.0);
            }
        }
    }
    RgbImage::from_raw_clamped(oh, ow, data)
}

/// Number of pyramid levels (at most 5) the image supports: each level needs
/// both dimensions to reach the window size.
fn supported_scales(mut h: usize, mut w: usize) -> usize {
    let mut scales = 0;
    while scales < MSSSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    scales
}

/// Multi-scale SSIM with the published five-scale exponents; images too
/// small for five levels use the supported prefix with renormalised
/// exponents. Errors if even a single level does not fit.
pub fn msssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    a.check_same_shape(b)?;
    let scales = supported_scales(a.height(), a.width());
    if scales == 0 {
        return Err(MetricsError::TooSmall {
            h: a.height(),
            w: a.width(),
            min: SSIM_WINDOW,
        });
    }
    let weight_sum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let mut ca = a.clone();
    let mut cb = b.clone();
    let mut score = 1.0;
    for scale in 0..scales {
        let (l, cs, _) = components(&ca, &cb)?;
        let weight = MSSSIM_WEIGHTS[scale] / weight_sum;
        // Tiny negative cs values (anticorrelated noise) are clamped before
        // the fractional power.
        score *= Float::powf(cs.max(0.0), weight);
        if scale == scales - 1 {
            score *= Float::powf(l.max(0.0), weight);
        } else {
            ca = halve(&ca);
            cb = halve(&cb);
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, phase: f64) -> RgbImage {
        RgbImage::from_fn(h, w, |y, x, c| {
            0.5 + 0.4 * Float::sin(0.3 * y as f64 + 0.5 * x as f64 + 0.7 * c as f64 + phase)
        })
        .unwrap()
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let k = gaussian_window();
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..SSIM_WINDOW / 2 {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
        assert!(k[5] > k[4] && k[4] > k[0]);
    }

    #[test]
    fn identical_images_score_one() {
        let img = test_image(16, 16, 0.0);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        assert_eq!(msssim(&img.resize_bilinear(64, 64), &img.resize_bilinear(64, 64)).unwrap(), 1.0);
    }

    #[test]
    fn scores_fall_with_distortion_severity() {
        let img = test_image(32, 32, 0.0);
        let mild = test_image(32, 32, 0.3);
        let severe = test_image(32, 32, 1.5);
        let s_mild = ssim(&img, &mild).unwrap();
        let s_severe = ssim(&img, &severe).unwrap();
        assert!(s_mild < 1.0);
        assert!(s_severe < s_mild);
        assert!(s_severe > -1.0 && s_mild <= 1.0);
    }

    #[test]
    fn small_images_are_rejected() {
        let img = test_image(12, 10, 0.0);
        assert!(matches!(
            ssim(&img, &img),
            Err(MetricsError::TooSmall { .. })
        ));
        let img = test_image(12, 12, 0.0);
        assert!(ssim(&img, &img).is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = test_image(16, 16, 0.0);
        let b = test_image(16, 20, 0.0);
        assert!(matches!(ssim(&a, &b), Err(MetricsError::Image(_))));
        assert!(matches!(msssim(&a, &b), Err(MetricsError::Image(_))));
    }

    #[test]
    fn msssim_uses_fewer_scales_for_small_images() {
        // 32x32 supports two levels (32 -> 16 -> 8 stops); must still work.
        assert_eq!(supported_scales(32, 32), 2);
        assert_eq!(supported_scales(176, 176), 5);
        assert_eq!(supported_scales(11, 11), 1);
        let a = test_image(32, 32, 0.0);
        let b = test_image(32, 32, 0.4);
        let m = msssim(&a, &b).unwrap();
        assert!(m > 0.0 && m < 1.0);
    }

    #[test]
    fn halving_averages_blocks() {
        let img = RgbImage::from_fn(4, 4, |y, x, _| f64::from(u8::from(y < 2 && x < 2))).unwrap();
        let half = halve(&img);
        assert_eq!(half.height(), 2);
        assert_eq!(half.get(0, 0, 0), 1.0);
        assert_eq!(half.get(0, 1, 0), 0.0);
        assert_eq!(half.get(1, 1, 0), 0.0);
    }
}
