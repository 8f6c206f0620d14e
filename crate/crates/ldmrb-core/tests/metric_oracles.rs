//! Independent second implementations of the structural-similarity and
//! Fréchet-distance computations, compared against the library versions.
//!
//! The oracles deliberately use different algorithms: direct per-window
//! loops instead of separable convolution for SSIM, and Denman–Beavers
//! iteration instead of an eigendecomposition for the matrix square root.

use ldmrb_core::image::RgbImage;
use ldmrb_core::metrics::{fid, msssim, ssim, FeatureBatch};
use ldmrb_core::rng::seeded_rng;
use rand::Rng;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// 11x11 normalized Gaussian, built as an explicit 2-D table.
fn window_2d() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let mut w = vec![0.0; WINDOW * WINDOW];
    let mut sum = 0.0;
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            w[y * WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Direct-window SSIM: per-channel, slide the 11x11 window over every valid
/// position, compute weighted moments longhand, average the SSIM map, then
/// average channels. Returns (luminance_mean, cs_mean, ssim_mean).
fn brute_components(a: &RgbImage, b: &RgbImage) -> (f64, f64, f64) {
    assert_eq!(a.height(), b.height());
    assert_eq!(a.width(), b.width());
    let w2 = window_2d();
    let (h, w) = (a.height(), a.width());
    let c1 = (K1 * K1) as f64;
    let c2 = (K2 * K2) as f64;
    let mut l_total = 0.0;
    let mut cs_total = 0.0;
    let mut s_total = 0.0;
    for ch in 0..3 {
        let mut l_sum = 0.0;
        let mut cs_sum = 0.0;
        let mut s_sum = 0.0;
        let mut count = 0usize;
        for top in 0..=(h - WINDOW) {
            for left in 0..=(w - WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for wy in 0..WINDOW {
                    for wx in 0..WINDOW {
                        let weight = w2[wy * WINDOW + wx];
                        mu_a += weight * a.get(top + wy, left + wx, ch);
                        mu_b += weight * b.get(top + wy, left + wx, ch);
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for wy in 0..WINDOW {
                    for wx in 0..WINDOW {
                        let weight = w2[wy * WINDOW + wx];
                        let da = a.get(top + wy, left + wx, ch) - mu_a;
                        let db = b.get(top + wy, left + wx, ch) - mu_b;
                        var_a += weight * da * da;
                        var_b += weight * db * db;
                        cov += weight * da * db;
                    }
                }
                let l = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
                let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
                l_sum += l;
                cs_sum += cs;
                s_sum += l * cs;
                count += 1;
            }
        }
        l_total += l_sum / count as f64;
        cs_total += cs_sum / count as f64;
        s_total += s_sum / count as f64;
    }
    (l_total / 3.0, cs_total / 3.0, s_total / 3.0)
}

fn brute_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    brute_components(a, b).2
}

/// 2x2 average pooling, dropping a trailing odd row/column.
fn brute_halve(img: &RgbImage) -> RgbImage {
    let (h, w) = (img.height() / 2, img.width() / 2);
    RgbImage::from_fn(h, w, |y, x, c| {
        (img.get(2 * y, 2 * x, c)
            + img.get(2 * y, 2 * x + 1, c)
            + img.get(2 * y + 1, 2 * x, c)
            + img.get(2 * y + 1, 2 * x + 1, c))
            / 4.0
    })
    .unwrap()
}

const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn brute_msssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let mut scales = 0;
    let (mut h, mut w) = (a.height(), a.width());
    while scales < 5 && h >= WINDOW && w >= WINDOW {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    assert!(scales >= 1);
    let weight_sum: f64 = MS_WEIGHTS[..scales].iter().sum();
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut product = 1.0;
    for scale in 0..scales {
        let (l, cs, _) = brute_components(&cur_a, &cur_b);
        let weight = MS_WEIGHTS[scale] / weight_sum;
        let cs = cs.max(0.0);
        product *= cs.powf(weight);
        if scale + 1 == scales {
            let l = l.max(0.0);
            product *= l.powf(weight);
        } else {
            cur_a = brute_halve(&cur_a);
            cur_b = brute_halve(&cur_b);
        }
    }
    product
}

fn random_pair(seed: u64, h: usize, w: usize) -> (RgbImage, RgbImage) {
    let mut rng = seeded_rng(seed);
    let base: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let other: Vec<f64> = base
        .iter()
        .map(|&v| (v + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0))
        .collect();
    (
        RgbImage::new(h, w, base).unwrap(),
        RgbImage::new(h, w, other).unwrap(),
    )
}

#[test]
fn ssim_matches_the_direct_window_oracle() {
    for seed in 0..4 {
        let (a, b) = random_pair(seed, 64, 64);
        let fast = ssim(&a, &b).unwrap();
        let slow = brute_ssim(&a, &b);
        assert!(
            (fast - slow).abs() < 1e-6,
            "seed {seed}: {fast} vs oracle {slow}"
        );
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
    // Rectangular shape, too.
    let (a, b) = random_pair(42, 37, 55);
    assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-6);
}

#[test]
fn msssim_matches_the_direct_window_oracle() {
    // 176x176 supports the full five scales (176 / 16 = 11).
    let (a, b) = random_pair(7, 176, 176);
    let fast = msssim(&a, &b).unwrap();
    let slow = brute_msssim(&a, &b);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs oracle {slow}");

    // 48x48 only supports three scales; the weight renormalization path
    // must agree as well.
    let (a, b) = random_pair(8, 48, 48);
    let fast = msssim(&a, &b).unwrap();
    let slow = brute_msssim(&a, &b);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs oracle {slow}");
}

// ---------------------------------------------------------------------------
// Fréchet distance oracle
// ---------------------------------------------------------------------------

/// Plain Gauss–Jordan inverse for small symmetric matrices.
fn invert(mat: &[f64], d: usize) -> Vec<f64> {
    let mut a = mat.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    for col in 0..d {
        let mut pivot = col;
        for row in col + 1..d {
            if a[row * d + col].abs() > a[pivot * d + col].abs() {
                pivot = row;
            }
        }
        assert!(a[pivot * d + col].abs() > 1e-12, "singular matrix in oracle");
        if pivot != col {
            for k in 0..d {
                a.swap(col * d + k, pivot * d + k);
                inv.swap(col * d + k, pivot * d + k);
            }
        }
        let p = a[col * d + col];
        for k in 0..d {
            a[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for row in 0..d {
            if row == col {
                continue;
            }
            let f = a[row * d + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..d {
                a[row * d + k] -= f * a[col * d + k];
                inv[row * d + k] -= f * inv[col * d + k];
            }
        }
    }
    inv
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Denman–Beavers iteration: Y ← (Y + Z⁻¹)/2, Z ← (Z + Y⁻¹)/2 converges to
/// (√M, √M⁻¹) for   positive-definite M.
fn sqrt_denman_beavers(mat: &[f64], d: usize) -> Vec<f64> {
    let mut y = mat.to_vec();
    let mut z = vec![0.0; d * d];
    for i in 0..d {
        z[i * d + i] = 1.0;
    }
    for _ in 0..100 {
        let y_inv = invert(&y, d);
        let z_inv = invert(&z, d);
        let mut next_y = vec![0.0; d * d];
        let mut next_z = vec![0.0; d * d];
        let mut delta = 0.0f64;
        for i in 0..d * d {
            next_y[i] = 0.5 * (y[i] + z_inv[i]);
            next_z[i] = 0.5 * (z[i] + y_inv[i]);
            delta = delta.max((next_y[i] - y[i]).abs());
        }
        y = next_y;
        z = next_z;
        if delta < 1e-14 {
            break;
        }
    }
    y
}

/// FID recomputed from scratch: means and unbiased covariances by explicit
/// loops, then trace of the DB square root of the symmetrized product.
fn brute_fid(ref_rows: &[Vec<f64>], gen_rows: &[Vec<f64>], d: usize) -> f64 {
    let stats = |rows: &[Vec<f64>]| {
        let n = rows.len();
        let mut mu = vec![0.0; d];
        for row in rows {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for row in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (row[i] - mu[i]) * (row[j] - mu[j]) / (n - 1) as f64;
                }
            }
        }
        (mu, cov)
    };
    let (mu_r, cov_r) = stats(ref_rows);
    let (mu_g, cov_g) = stats(gen_rows);
    // tr√(Σr Σg) via the symmetrized form √(√Σr Σg √Σr).
    let sqrt_r = sqrt_denman_beavers(&cov_r, d);
    let inner = matmul(&matmul(&sqrt_r, &cov_g, d), &sqrt_r, d);
    let sqrt_inner = sqrt_denman_beavers(&inner, d);
    let trace_sqrt: f64 = (0..d).map(|i| sqrt_inner[i * d + i]).sum();
    let tr_r: f64 = (0..d).map(|i| cov_r[i * d + i]).sum();
    let tr_g: f64 = (0..d).map(|i| cov_g[i * d + i]).sum();
    let mean_sq: f64 = mu_r
        .iter()
        .zip(&mu_g)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    mean_sq + tr_r + tr_g - 2.0 * trace_sqrt
}

fn random_rows(seed: u64, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-spread..spread)).collect())
        .collect()
}

fn batch_from_rows(rows: &[Vec<f64>], d: usize) -> FeatureBatch {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    FeatureBatch::new("oracle-extractor", d, flat).unwrap()
}

#[test]
fn fid_matches_the_denman_beavers_oracle() {
    for (seed, d, n) in [(1u64, 4usize, 60usize), (2, 6, 80), (3, 8, 50)] {
        let ref_rows = random_rows(seed * 10 + 1, n, d, 1.5);
        let gen_rows: Vec<Vec<f64>> = random_rows(seed * 10 + 2, n, d, 1.0)
            .into_iter()
            .map(|row| row.into_iter().map(|v| v + 0.3).collect())
            .collect();
        let fast = fid(
            &batch_from_rows(&ref_rows, d),
            &batch_from_rows(&gen_rows, d),
        )
        .unwrap();
        let slow = brute_fid(&ref_rows, &gen_rows, d);
        assert!(
            (fast - slow).abs() < 1e-6 * slow.abs().max(1.0),
            "seed {seed}: {fast} vs oracle {slow}"
        );
    }
}

#[test]
fn fid_one_dimensional_two_gaussian_case() {
    // Standardized 1-D samples: exact mean 0, unbiased variance 1. Shifting
    // one set by 1 gives FID = (Δμ)² + σ₁² + σ₂² − 2σ₁σ₂ = 1.
    let n = 200;
    let mut rng = seeded_rng(17);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let standardized: Vec<f64> = raw.iter().map(|v| (v - mean) / var.sqrt()).collect();
    let shifted: Vec<f64> = standardized.iter().map(|v| v + 1.0).collect();
    let a = FeatureBatch::new("oracle-extractor", 1, standardized).unwrap();
    let b = FeatureBatch::new("oracle-extractor", 1, shifted).unwrap();
    let value = fid(&a, &b).unwrap();
    assert!((value - 1.0).abs() < 1e-6, "got {value}");
}
