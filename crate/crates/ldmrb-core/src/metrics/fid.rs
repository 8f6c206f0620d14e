//! Fréchet distance between Gaussian fits of two feature batches.
//!
//! `d² = ||μ_r - μ_g||² + Tr(Σ_r + Σ_g - 2 (Σ_r Σ_g)^½)`, with the matrix
//! square root evaluated through the symmetrised product
//! `√Σ_r · Σ_g · √Σ_r`, whose eigenvalues are the squares of the singular
//! values of `(Σ_r Σ_g)^½`. Symmetric eigendecompositions use a cyclic
//! Jacobi solver. Covariances are the unbiased (N-1) estimates; batches
//! whose covariance is numerically singular are regularised with `λI` and a
//! warning rather than rejected.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;

use super::{FeatureBatch, MetricsError};

/// Ridge added to numerically singular covariances.
pub const FID_REGULARIZER: f64 = 1e-6;
/// Eigenvalues of the symmetrised product below this are treated as noise.
pub const FID_NEGATIVE_TOLERANCE: f64 = -1e-8;

/// Mean vector and unbiased covariance of a feature batch.
///
/// Errors with [`MetricsError::DegenerateCovariance`] when the batch holds
/// fewer than two samples.
pub fn mean_and_covariance(batch: &FeatureBatch) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let n = batch.len();
    let d = batch.dim;
    if n < 2 {
        return Err(MetricsError::DegenerateCovariance {
            samples: n,
            detail: String::from("need at least 2 samples for an unbiased covariance"),
        });
    }
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            mean[j] += batch.data[row * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in 0..n {
        for j in 0..d {
            let xj = batch.data[row * d + j] - mean[j];
            for k in j..d {
                let xk = batch.data[row * d + k] - mean[k];
                cov[j * d + k] += xj * xk;
            }
        }
    }
    let denom = (n - 1) as f64;
    for j in 0..d {
        for k in j..d {
            let v = cov[j * d + k] / denom;
            cov[j * d + k] = v;
            cov[k * d + j] = v;
        }
    }
    Ok((mean, cov))
}

/// Cyclic Jacobi eigendecomposition of a symmetric `d x d` matrix.
///
/// Returns eigenvalues and the orthogonal matrix `V` (row-major, columns are
/// eigenvectors) with `A = V diag(λ) Vᵀ`.
pub fn symmetric_eigen(mat: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(mat.len(), d * d);
    let mut a = mat.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if d == 1 {
        return (vec![a[0]], v);
    }
    let scale: f64 = mat.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-14 * scale;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off = off.max(a[p * d + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Update rows/columns p and q of A.
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

fn matmul_square(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let x = a[i * d + k];
            if x == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += x * b[k * d + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric positive-semidefinite matrix
/// (negative eigenvalues from rounding are clamped to zero).
pub fn sqrt_psd(mat: &[f64], d: usize) -> Vec<f64> {
    let (eig, v) = symmetric_eigen(mat, d);
    // S = V diag(sqrt(max(λ, 0))) Vᵀ
    let mut scaled = vec![0.0; d * d]; // V * diag(..)
    for i in 0..d {
        for j in 0..d {
            scaled[i * d + j] = v[i * d + j] * eig[j].max(0.0).sqrt();
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += scaled[i * d + k] * v[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

fn min_eigenvalue(mat: &[f64], d: usize) -> f64 {
    let (eig, _) = symmetric_eigen(mat, d);
    eig.into_iter().fold(f64::INFINITY, f64::min)
}

/// Fréchet distance between the Gaussian fits of `reference` and
/// `generated` features.
///
/// Both batches must come from the same extractor (same id and dimension)
/// and hold at least two samples. The result is clamped to be non-negative.
pub fn fid(reference: &FeatureBatch, generated: &FeatureBatch) -> Result<f64, MetricsError> {
    if reference.extractor_id != generated.extractor_id || reference.dim != generated.dim {
        return Err(MetricsError::ExtractorMismatch {
            left: alloc::format!("{}[{}]", reference.extractor_id, reference.dim),
            right: alloc::format!("{}[{}]", generated.extractor_id, generated.dim),
        });
    }
    let d = reference.dim;
    let (mu_r, mut cov_r) = mean_and_covariance(reference)?;
    let (mu_g, mut cov_g) = mean_and_covariance(generated)?;

    for (label, cov) in [("reference", &mut cov_r), ("generated", &mut cov_g)] {
        if min_eigenvalue(cov, d) < 1e-10 {
            log::warn!(
                "{label} covariance is numerically singular; adding {FID_REGULARIZER} ridge"
            );
            for i in 0..d {
                cov[i * d + i] += FID_REGULARIZER;
            }
        }
    }

    let mean_term: f64 = mu_r
        .iter()
        .zip(&mu_g)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();

    let sqrt_r = sqrt_psd(&cov_r, d);
    let inner = matmul_square(&matmul_square(&sqrt_r, &cov_g, d), &sqrt_r, d);
    // Symmetrise before the eigensolve; the product is symmetric in exact
    // arithmetic.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = symmetric_eigen(&sym, d);
    let mut trace_sqrt = 0.0;
    for lambda in eig {
        if lambda < FID_NEGATIVE_TOLERANCE {
            log::warn!("truncating negative eigenvalue {lambda} in the covariance product");
        }
        trace_sqrt += lambda.max(0.0).sqrt();
    }

    let value = mean_term + trace(&cov_r) + trace(&cov_g) - 2.0 * trace_sqrt;
    debug_assert!(value > -1e-6, "distance fell below the rounding floor: {value}");
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(id: &str, dim: usize, rows: &[&[f64]]) -> FeatureBatch {
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        FeatureBatch::new(id, dim, data).unwrap()
    }

    #[test]
    fn identical_batches_have_zero_distance() {
        let a = batch(
            "ext",
            2,
            &[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.25], &[2.0, 2.0]],
        );
        let d = fid(&a, &a).unwrap();
        assert!(d.abs() < 1e-9, "distance {d}");
    }

    #[test]
    fn mean_shift_equals_squared_distance() {
        // Same covariance, means differing by v: d = ||v||².
        let a = batch("ext", 2, &[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let shifted: Vec<Vec<f64>> = a
            .data
            .chunks(2)
            .map(|r| vec![r[0] + 3.0, r[1] - 4.0])
            .collect();
        let rows: Vec<&[f64]> = shifted.iter().map(|r| r.as_slice()).collect();
        let b = batch("ext", 2, &rows);
        let d = fid(&a, &b).unwrap();
        assert!((d - 25.0).abs() < 1e-9, "distance {d}");
    }

    #[test]
    fn diagonal_case_matches_closed_form() {
        // For diagonal covariances the trace term is Σ (√a_i - √b_i)².
        // Construct batches with exactly known sample covariance.
        // Batch A: values ±1 in each column independently -> cov = I * (4/3)
        // over 4 samples with mean 0: sum of squares = 4, /3 = 4/3.
        let a = batch(
            "ext",
            2,
            &[&[1.0, 1.0], &[1.0, -1.0], &[-1.0, 1.0], &[-1.0, -1.0]],
        );
        let b = batch(
            "ext",
            2,
            &[&[2.0, 2.0], &[2.0, -2.0], &[-2.0, 2.0], &[-2.0, -2.0]],
        );
        // cov_a = (4/3) I, cov_b = (16/3) I, means both 0.
        // d = 2 * (sqrt(4/3) - sqrt(16/3))² = 2 * (2/√3 - 4/√3)² = 2 * 4/3 = 8/3.
        let d = fid(&a, &b).unwrap();
        assert!((d - 8.0 / 3.0).abs() < 1e-9, "distance {d}");
    }

    #[test]
    fn extractor_mismatch_is_rejected() {
        let a = batch("ext-a", 1, &[&[0.0], &[1.0]]);
        let b = batch("ext-b", 1, &[&[0.0], &[1.0]]);
        assert!(matches!(
            fid(&a, &b),
            Err(MetricsError::ExtractorMismatch { .. })
        ));
    }

    #[test]
    fn single_sample_batches_are_rejected() {
        let a = batch("ext", 2, &[&[0.0, 0.0]]);
        let b = batch("ext", 2, &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            fid(&a, &b),
            Err(MetricsError::DegenerateCovariance { samples: 1, .. })
        ));
    }

    #[test]
    fn degenerate_covariance_is_regularised_not_fatal() {
        // All samples identical: covariance is exactly zero.
        let a = batch("ext", 2, &[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let b = batch("ext", 2, &[&[1.0, 2.0], &[2.0, 3.0], &[0.0, 1.0]]);
        let d = fid(&a, &b).unwrap();
        assert!(d.is_finite() && d >= 0.0);
    }

    #[test]
    fn jacobi_reconstructs_the_matrix() {
        let mut rng = crate::rng::seeded_rng(3);
        let d = 6;
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.gen_range(-1.0..1.0);
                m[i * d + j] = v;
                m[j * d + i] = v;
            }
        }
        let (eig, v) = symmetric_eigen(&m, d);
        // Rebuild V diag(eig) Vᵀ and compare.
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += v[i * d + k] * eig[k] * v[j * d + k];
                }
                assert!(
                    (acc - m[i * d + j]).abs() < 1e-9,
                    "entry ({i},{j}): {acc} vs {}",
                    m[i * d + j]
                );
            }
        }
        // V orthogonal.
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += v[k * d + i] * v[k * d + j];
                }
                let expect = f64::from(u8::from(i == j));
                assert!((acc - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let m = [4.0, 2.0, 2.0, 3.0];
        let s = sqrt_psd(&m, 2);
        let sq = matmul_square(&s, &s, 2);
        for (a, b) in sq.iter().zip(&m) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
