//! Adversarial-example files: a quantised PNG next to a JSON audit sidecar.
//!
//! Every crafted example is stored as `item_NNNNNN.png` plus
//! `item_NNNNNN.json`. The sidecar carries full provenance — plan hash,
//! model, condition, prompt, seeds, the attack configuration and loss
//! trace, and the L∞ norm measured *after* quantisation. Consumers load
//! the PNG (never the in-memory float image), so fresh and resumed runs
//! see bit-identical adversarial inputs; before any evaluation the stored
//! image is re-validated against the budget.

use std::path::{Path, PathBuf};

use ldmrb_core::attack::{AttackConfig, AttackTrace};
use ldmrb_core::image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{self, IoError, QUANT_SLACK};

/// Errors from artifact storage and re-validation.
#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Sidecar {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(
        "stored adversarial image for item {item_id} strays {distance} from its original \
         (budget {epsilon} + quantisation slack)"
    )]
    BudgetViolation {
        item_id: u64,
        distance: f64,
        epsilon: f64,
    },
    #[error("artifact: {0}")]
    Invalid(String),
}

/// Attack provenance stored for crafted (non-baseline) conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDetail {
    pub config: AttackConfig,
    pub trace: AttackTrace,
    pub final_loss: f64,
}

/// The JSON sidecar next to each adversarial PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvSidecar {
    /// Hash of the plan that produced this artifact.
    pub plan_hash: String,
    /// Model the example was crafted on.
    pub model_id: String,
    pub item_id: u64,
    /// Module name for crafted examples, or a baseline label such as
    /// `gaussian`.
    pub condition: String,
    /// Prompt used while crafting.
    pub prompt: String,
    /// Index of that prompt in the item's prompt list.
    pub craft_prompt_index: usize,
    /// Seed the crafting run used.
    pub seed: u64,
    /// L∞ distance to the original, measured on the quantised image.
    pub linf_norm: f64,
    /// Present for attack conditions, absent for noise baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackDetail>,
}

fn png_path(dir: &Path, item_id: u64) -> PathBuf {
    dir.join(format!("item_{item_id:06}.png"))
}

fn json_path(dir: &Path, item_id: u64) -> PathBuf {
    dir.join(format!("item_{item_id:06}.json"))
}

/// Saves an adversarial image and its sidecar, then reloads the PNG and
/// returns the quantised image every consumer must use.
pub fn save_artifact(
    dir: &Path,
    image: &RgbImage,
    sidecar: &AdvSidecar,
) -> Result<RgbImage, ArtifactError> {
    let png = png_path(dir, sidecar.item_id);
    imageio::save_rgb(&png, image)?;
    let stored = imageio::load_rgb(&png)?;

    let json = json_path(dir, sidecar.item_id);
    imageio::ensure_parent(&json)?;
    let mut text = serde_json::to_string_pretty(sidecar).map_err(|e| ArtifactError::Sidecar {
        path: json.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| IoError::file(&json, e))?;
    Ok(stored)
}

/// Loads an artifact if both its PNG and sidecar exist; `Ok(None)` when
/// either is missing (the item has not been crafted yet).
pub fn load_artifact(
    dir: &Path,
    item_id: u64,
) -> Result<Option<(RgbImage, AdvSidecar)>, ArtifactError> {
    let png = png_path(dir, item_id);
    let json = json_path(dir, item_id);
    if !png.is_file() || !json.is_file() {
        return Ok(None);
    }
    let image = imageio::load_rgb(&png)?;
    let text = std::fs::read_to_string(&json).map_err(|e| IoError::file(&json, e))?;
    let sidecar: AdvSidecar =
        serde_json::from_str(&text).map_err(|e| ArtifactError::Sidecar {
            path: json.display().to_string(),
            source: e,
        })?;
    if sidecar.item_id != item_id {
        return Err(ArtifactError::Invalid(format!(
            "sidecar {} claims item {}, expected {item_id}",
            json.display(),
            sidecar.item_id
        )));
    }
    Ok(Some((image, sidecar)))
}

/// Re-checks a stored adversarial image against the L∞ budget before it is
/// evaluated. Quantising to 8 bits moves each sample by at most half a
/// step, so the acceptance line is `epsilon + QUANT_SLACK` (plus a strict
/// float tolerance).
pub fn revalidate_budget(
    original: &RgbImage,
    stored: &RgbImage,
    epsilon: f64,
    item_id: u64,
) -> Result<f64, ArtifactError> {
    let distance = original
        .linf_distance(stored)
        .map_err(|e| ArtifactError::Invalid(e.to_string()))?;
    if distance > epsilon + QUANT_SLACK + 1e-9 {
        return Err(ArtifactError::BudgetViolation {
            item_id,
            distance,
            epsilon,
        });
    }
    Ok(distance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldmrb_core::image::RgbImage;
    use ldmrb_core::rng::seeded_rng;
    use rand::Rng;

    fn random_image(seed: u64, side: usize) -> RgbImage {
        let mut rng = seeded_rng(seed);
        RgbImage::from_fn(side, side, |_, _, _| rng.gen()).unwrap()
    }

    fn sample_sidecar(item_id: u64, linf: f64) -> AdvSidecar {
        AdvSidecar {
            plan_hash: "abc123".into(),
            model_id: "toy-var-s0-c4".into(),
            item_id,
            condition: "encoder".into(),
            prompt: "a boat at sea".into(),
            craft_prompt_index: 0,
            seed: 7,
            linf_norm: linf,
            attack: Some(AttackDetail {
                config: AttackConfig::default(),
                trace: AttackTrace {
                    losses: vec![0.0, 1.0, 2.0],
                },
                final_loss: 2.0,
            }),
        }
    }

    #[test]
    fn artifacts_round_trip_and_reload_quantised_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let image = random_image(3, 12);
        let sidecar = sample_sidecar(42, 0.05);
        let stored = save_artifact(dir.path(), &image, &sidecar).unwrap();
        assert_eq!(stored, imageio::quantize_image(&image));

        let (loaded, loaded_sidecar) = load_artifact(dir.path(), 42).unwrap().unwrap();
        assert_eq!(loaded, stored);
        assert_eq!(loaded_sidecar, sidecar);
    }

    #[test]
    fn missing_artifacts_read_as_none() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_artifact(dir.path(), 1).unwrap().is_none());
        // A PNG without its sidecar is also "not crafted yet".
        let image = random_image(1, 8);
        imageio::save_rgb(&dir.path().join("item_000001.png"), &image).unwrap();
        assert!(load_artifact(dir.path(), 1).unwrap().is_none());
    }

    #[test]
    fn sidecar_item_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let image = random_image(2, 8);
        save_artifact(dir.path(), &image, &sample_sidecar(5, 0.0)).unwrap();
        std::fs::rename(
            dir.path().join("item_000005.png"),
            dir.path().join("item_000009.png"),
        )
        .unwrap();
        std::fs::rename(
            dir.path().join("item_000005.json"),
            dir.path().join("item_000009.json"),
        )
        .unwrap();
        assert!(matches!(
            load_artifact(dir.path(), 9),
            Err(ArtifactError::Invalid(_))
        ));
    }

    #[test]
    fn budget_revalidation_allows_quantisation_but_not_violations() {
        let original = random_image(4, 10);
        // A perturbation exactly at the budget survives quantisation.
        let epsilon = 0.1;
        let perturbed = RgbImage::new(
            10,
            10,
            original
                .data()
                .iter()
                .map(|v| (v + epsilon).min(1.0))
                .collect(),
        )
        .unwrap();
        let quantised = imageio::quantize_image(&perturbed);
        let distance = revalidate_budget(&original, &quantised, epsilon, 1).unwrap();
        assert!(distance <= epsilon + QUANT_SLACK + 1e-9);

        // Half a quantisation step past the slack line fails.
        let violating = RgbImage::new(
            10,
            10,
            original
                .data()
                .iter()
                .map(|v| (v + epsilon + 3.0 / 255.0).min(1.0))
                .collect(),
        )
        .unwrap();
        let err = revalidate_budget(&original, &imageio::quantize_image(&violating), epsilon, 1)
            .unwrap_err();
        assert!(matches!(err, ArtifactError::BudgetViolation { .. }));
    }

    #[test]
    fn baseline_sidecars_omit_attack_detail() {
        let sidecar = AdvSidecar {
            attack: None,
            condition: "gaussian".into(),
            ..sample_sidecar(3, 0.09)
        };
        let json = serde_json::to_string(&sidecar).unwrap();
        assert!(!json.contains("\"attack\""));
        let back: AdvSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sidecar);
    }
}
