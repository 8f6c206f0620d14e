//! L∞-bounded feature-distortion attacks.
//!
//! The attack maximises the summed Euclidean distance between a target
//! module's activations on the original image and on the adversarial
//! candidate, holding the prompt, seed, and sampling parameters fixed, while
//! keeping every pixel within `epsilon` of the original and inside `[0, 1]`.
//! Optimisation is projected gradient ascent with sign steps.

use alloc::format;
#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, DiffusionModel, EditRequest, ModuleTarget, TapRecord};
use crate::image::{KeepMask, RgbImage};
use crate::rng::{derive_seed, seeded_rng};

/// Default L∞ budget.
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Default per-iteration step length.
pub const DEFAULT_STEP_LENGTH: f64 = 0.01;
/// Default number of ascent iterations.
pub const DEFAULT_ITERATIONS: usize = 15;

/// Attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ budget; every adversarial sample stays within `epsilon` of the
    /// original. Zero degenerates to a no-op attack.
    pub epsilon: f64,
    /// Sign-step length per iteration; must be positive.
    pub step_length: f64,
    /// Number of ascent iterations; must be at least 1.
    pub iterations: usize,
    /// Denoising steps used while crafting (a coarse schedule keeps the
    /// gradient affordable); final evaluation uses its own, finer schedule.
    pub attack_diffusion_steps: usize,
    /// Return the best-loss iterate rather than the last one.
    pub keep_best: bool,
    /// Start from a uniform random point inside the ε-ball instead of the
    /// original image. Without this the first gradient is exactly zero:
    /// the reference activations are recorded with the same seed, so the
    /// loss surface starts at its global minimum.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            step_length: DEFAULT_STEP_LENGTH,
            iterations: DEFAULT_ITERATIONS,
            attack_diffusion_steps: crate::adapter::ATTACK_DIFFUSION_STEPS,
            keep_best: true,
            random_start: true,
        }
    }
}

impl AttackConfig {
    /// Validates hyperparameter ranges.
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "epsilon {} outside [0, 1] (pixels live in [0, 1])",
                self.epsilon
            )));
        }
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "step_length {} must be positive",
                self.step_length
            )));
        }
        if self.epsilon > 0.0 && self.step_length > self.epsilon {
            return Err(AttackError::InvalidConfig(format!(
                "step_length {} exceeds epsilon {}",
                self.step_length, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(AttackError::InvalidConfig(
                "iterations must be at least 1".into(),
            ));
        }
        if self.attack_diffusion_steps == 0 {
            return Err(AttackError::InvalidConfig(
                "attack_diffusion_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration loss values: entry 0 is the starting iterate's loss, entry
/// `i` the loss after `i` ascent steps, and the last entry the loss of the
/// final iterate; length is `iterations + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub losses: Vec<f64>,
}

/// A crafted adversarial example together with everything needed to audit
/// and reproduce it.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub original: RgbImage,
    pub adversarial: RgbImage,
    pub target: ModuleTarget,
    pub prompt: String,
    pub mask: Option<KeepMask>,
    pub model_id: String,
    pub seed: u64,
    pub config: AttackConfig,
    pub trace: AttackTrace,
    /// Feature-distortion loss of the returned adversarial image.
    pub final_loss: f64,
}

/// Errors from attack crafting.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    /// The loss or its gradient became non-finite.
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    /// A hyperparameter violates its documented range.
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    /// Current and reference taps cannot be paired one-to-one.
    #[error("tap pairing mismatch: {0}")]
    PairingMismatch(String),
}

/// Sums the Euclidean distances between paired current and reference taps.
///
/// Records pair by resolved module and step index; the pairing must be
/// one-to-one and shapes must agree.
pub fn feature_distortion_loss(
    current: &[TapRecord],
    reference: &[TapRecord],
) -> Result<f64, AttackError> {
    if current.len() != reference.len() {
        return Err(AttackError::PairingMismatch(format!(
            "{} current taps vs {} reference taps",
            current.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for cur in current {
        let key = (cur.target.resolve(), cur.step_index);
        let mut matched: Option<&TapRecord> = None;
        for r in reference {
            if (r.target.resolve(), r.step_index) == key {
                if matched.is_some() {
                    return Err(AttackError::PairingMismatch(format!(
                        "duplicate reference tap for '{}' step {}",
                        key.0, key.1
                    )));
                }
                matched = Some(r);
            }
        }
        let Some(reference_tap) = matched else {
            return Err(AttackError::PairingMismatch(format!(
                "no reference tap for '{}' step {}",
                key.0, key.1
            )));
        };
        if reference_tap.values.len() != cur.values.len() {
            return Err(AttackError::PairingMismatch(format!(
                "tap '{}' step {} holds {} values vs {} in the reference",
                key.0,
                key.1,
                cur.values.len(),
                reference_tap.values.len()
            )));
        }
        total += cur
            .values
            .iter()
            .zip(&reference_tap.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

/// Projects `values` onto the intersection of the L∞ ball of radius
/// `epsilon` around `origin` and the `[0, 1]` box, in place.
pub fn linf_project(values: &mut [f64], origin: &[f64], epsilon: f64) {
    debug_assert_eq!(values.len(), origin.len());
    for (v, &o) in values.iter_mut().zip(origin) {
        let lo = (o - epsilon).max(0.0);
        let hi = (o + epsilon).min(1.0);
        *v = v.clamp(lo, hi);
    }
}

/// Crafts an adversarial image by projected gradient ascent on the
/// feature-distortion loss of `target`.
///
/// Reference activations are recorded from the unmodified request (same
/// prompt, seed, and sampling parameters) before optimisation starts. The
/// crafting schedule is `config.attack_diffusion_steps` regardless of the
/// request's own step count.
pub fn pgd_attack(
    model: &mut dyn DiffusionModel,
    request: &EditRequest,
    target: ModuleTarget,
    config: &AttackConfig,
) -> Result<AdversarialExample, AttackError> {
    config.validate()?;
    let info = model.info().clone();
    if !info.differentiable {
        return Err(AttackError::Adapter(AdapterError::NonDifferentiable {
            model_id: info.model_id,
        }));
    }
    if !info.tap_capable {
        return Err(AttackError::Adapter(AdapterError::TapsUnavailable {
            model_id: info.model_id,
        }));
    }

    let craft_request = request
        .clone()
        .with_steps(config.attack_diffusion_steps);
    let reference = model.run_edit(&craft_request, &[target])?.taps;
    if reference.is_empty() {
        return Err(AttackError::Adapter(AdapterError::UnsupportedTarget {
            model_id: info.model_id,
            target,
        }));
    }

    let origin = request.image.data().to_vec();
    let mut current = origin.clone();
    if config.random_start && config.epsilon > 0.0 {
        let mut rng = seeded_rng(derive_seed(request.seed, "pgd-random-start"));
        for v in &mut current {
            *v += rng.gen_range(-config.epsilon..=config.epsilon);
        }
        linf_project(&mut current, &origin, config.epsilon);
    }

    let evaluate_image = |data: Vec<f64>| {
        RgbImage::new(request.image.height(), request.image.width(), data)
            .map_err(|e| AttackError::Adapter(AdapterError::Image(e)))
    };

    let mut losses = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for iteration in 0..config.iterations {
        let image = evaluate_image(current.clone())?;
        let iter_request = craft_request.clone().with_image(image);
        let (loss, grad) = model.loss_and_gradient(&iter_request, target, &reference)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(AttackError::NonFiniteLoss { iteration });
        }
        losses.push(loss);
        if config.keep_best && best.as_ref().is_none_or(|(b, _)| loss > *b) {
            best = Some((loss, current.clone()));
        }
        for (v, g) in current.iter_mut().zip(&grad.data) {
            *v += config.step_length * g.signum() * f64::from(u8::from(*g != 0.0));
        }
        linf_project(&mut current, &origin, config.epsilon);
    }

    // Loss of the final iterate (forward pass only).
    let final_image = evaluate_image(current.clone())?;
    let final_request = craft_request.clone().with_image(final_image);
    let taps = model.run_edit(&final_request, &[target])?.taps;
    let final_loss = feature_distortion_loss(&taps, &reference)?;
    if !final_loss.is_finite() {
        return Err(AttackError::NonFiniteLoss {
            iteration: config.iterations,
        });
    }
    losses.push(final_loss);
    if config.keep_best && best.as_ref().is_none_or(|(b, _)| final_loss > *b) {
        best = Some((final_loss, current.clone()));
    }

    let (chosen_loss, chosen) = if config.keep_best {
        best.expect("at least one iterate was evaluated")
    } else {
        (final_loss, current)
    };
    let adversarial = evaluate_image(chosen)?;
    debug_assert!(
        request.image.linf_distance(&adversarial).unwrap() <= config.epsilon + 1e-9,
        "projection failed to keep the budget"
    );

    Ok(AdversarialExample {
        original: request.image.clone(),
        adversarial,
        target,
        prompt: request.prompt.clone(),
        mask: request.mask.clone(),
        model_id: info.model_id,
        seed: request.seed,
        config: config.clone(),
        trace: AttackTrace { losses },
        final_loss: chosen_loss,
    })
}

/// The noise baseline: adds seeded Gaussian noise with `sigma = epsilon / 2`
/// and projects back into the ε-ball and the `[0, 1]` box, mirroring the
/// budget the optimised attack gets.
pub fn gaussian_baseline(image: &RgbImage, epsilon: f64, seed: u64) -> RgbImage {
    if epsilon <= 0.0 {
        return image.clone();
    }
    let mut rng = seeded_rng(derive_seed(seed, "gaussian-baseline"));
    let normal = Normal::new(0.0, epsilon / 2.0).expect("valid normal");
    let origin = image.data();
    let mut data: Vec<f64> = origin
        .iter()
        .map(|&v| v + normal.sample(&mut rng))
        .collect();
    linf_project(&mut data, origin, epsilon);
    RgbImage::new(image.height(), image.width(), data).expect("projection keeps range")
}
