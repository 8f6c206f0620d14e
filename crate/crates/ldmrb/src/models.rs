//! Model loading: builtin deterministic editors plus a probe for external
//! diffusion checkpoints.
//!
//! Builtin specs follow `toy:<seed>:<channels>:<steps>` (variation mode) or
//! `toy-inpaint:<seed>:<channels>:<steps>` (inpainting mode) and build the
//! self-contained editor from `ldmrb_core`. Anything else is treated as an
//! external checkpoint: the loader looks for its weights next to the given
//! path or under `$LDMRB_MODEL_CACHE/<model_id>`, and reports honestly —
//! missing weights are `Unavailable`, present-but-unexecutable weights are
//! `UnsupportedPipeline`. This build executes only the builtin editors;
//! external checkpoints require a GPU diffusion runtime.

use std::env;
use std::path::PathBuf;

use ldmrb_core::adapter::toy::{build_toy_inpainting_model, build_toy_model, ToyDiffusionModel};
use ldmrb_core::adapter::{AdapterError, DiffusionModel, ModelDescriptor, ModelKind};
use thiserror::Error;

/// Environment variable naming the external weight cache directory.
pub const MODEL_CACHE_ENV: &str = "LDMRB_MODEL_CACHE";

/// Marker file identifying a diffusion checkpoint directory layout.
pub const CHECKPOINT_MARKER: &str = "model_index.json";

/// Errors from model resolution.
#[derive(Debug, Error)]
pub enum ModelLoadError {
    /// A `toy:`-prefixed spec that does not parse.
    #[error("invalid builtin model spec '{spec}': {detail}")]
    InvalidSpec { spec: String, detail: String },
    /// No weights found anywhere we were told to look.
    #[error("model '{model_id}' unavailable: {detail}")]
    Unavailable { model_id: String, detail: String },
    /// Weights exist but this build cannot execute them.
    #[error("model '{model_id}' cannot run here: {detail}")]
    UnsupportedPipeline { model_id: String, detail: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// A parsed builtin model spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuiltinSpec {
    pub kind: ModelKind,
    pub seed: u64,
    pub channels: usize,
    pub steps: usize,
}

impl BuiltinSpec {
    /// Builds the editor this spec describes.
    pub fn build(&self) -> Result<ToyDiffusionModel, AdapterError> {
        match self.kind {
            ModelKind::Variation => build_toy_model(self.seed, self.channels, self.steps),
            ModelKind::Inpainting => {
                build_toy_inpainting_model(self.seed, self.channels, self.steps)
            }
        }
    }

    /// The spec string [`parse_builtin`] accepts for this value.
    pub fn spec_string(&self) -> String {
        let prefix = match self.kind {
            ModelKind::Variation => "toy",
            ModelKind::Inpainting => "toy-inpaint",
        };
        format!("{prefix}:{}:{}:{}", self.seed, self.channels, self.steps)
    }

    /// A full descriptor for plans and reports.
    pub fn descriptor(&self) -> Result<ModelDescriptor, AdapterError> {
        let model = self.build()?;
        Ok(ModelDescriptor {
            model_id: model.info().model_id.clone(),
            kind: self.kind,
            weights: self.spec_string(),
            revision: String::new(),
        })
    }
}

/// Recognises a builtin spec string; `None` means "not a builtin spec".
pub fn parse_builtin(spec: &str) -> Option<Result<BuiltinSpec, ModelLoadError>> {
    let (kind, rest) = if let Some(rest) = spec.strip_prefix("toy-inpaint:") {
        (ModelKind::Inpainting, rest)
    } else if let Some(rest) = spec.strip_prefix("toy:") {
        (ModelKind::Variation, rest)
    } else {
        return None;
    };
    let invalid = |detail: &str| ModelLoadError::InvalidSpec {
        spec: spec.to_string(),
        detail: detail.to_string(),
    };
    let parts: Vec<&str> = rest.split(':').collect();
    if parts.len() != 3 {
        return Some(Err(invalid("expected <seed>:<channels>:<steps>")));
    }
    let seed = match parts[0].parse::<u64>() {
        Ok(v) => v,
        Err(_) => return Some(Err(invalid("seed must be an unsigned integer"))),
    };
    let channels = match parts[1].parse::<usize>() {
        Ok(v) if v >= 2 => v,
        _ => return Some(Err(invalid("channels must be an integer >= 2"))),
    };
    let steps = match parts[2].parse::<usize>() {
        Ok(v) if v >= 1 => v,
        _ => return Some(Err(invalid("steps must be an integer >= 1"))),
    };
    Some(Ok(BuiltinSpec {
        kind,
        seed,
        channels,
        steps,
    }))
}

fn cache_dir() -> Option<PathBuf> {
    env::var_os(MODEL_CACHE_ENV).map(PathBuf::from)
}

/// Loads the model a descriptor names.
///
/// The `weights` field carries either a builtin spec or a checkpoint path;
/// when it is neither, `$LDMRB_MODEL_CACHE/<model_id>` is probed.
pub fn load_model(desc: &ModelDescriptor) -> Result<Box<dyn DiffusionModel>, ModelLoadError> {
    if let Some(parsed) = parse_builtin(&desc.weights) {
        let spec = parsed?;
        if spec.kind != desc.kind {
            return Err(ModelLoadError::InvalidSpec {
                spec: desc.weights.clone(),
                detail: format!(
                    "spec kind {:?} does not match descriptor kind {:?}",
                    spec.kind, desc.kind
                ),
            });
        }
        return Ok(Box::new(spec.build()?));
    }

    let direct = PathBuf::from(&desc.weights);
    let candidates: Vec<PathBuf> = [
        (!desc.weights.is_empty()).then(|| direct.clone()),
        cache_dir().map(|c| c.join(&desc.model_id)),
    ]
    .into_iter()
    .flatten()
    .collect();

    for dir in &candidates {
        if dir.is_dir() {
            return if dir.join(CHECKPOINT_MARKER).is_file() {
                Err(ModelLoadError::UnsupportedPipeline {
                    model_id: desc.model_id.clone(),
                    detail: format!(
                        "checkpoint at {} has a recognisable layout, but this build \
                         executes only the builtin editors (toy:<seed>:<channels>:<steps>)",
                        dir.display()
                    ),
                })
            } else {
                Err(ModelLoadError::Unavailable {
                    model_id: desc.model_id.clone(),
                    detail: format!(
                        "{} exists but contains no {CHECKPOINT_MARKER}",
                        dir.display()
                    ),
                })
            };
        }
    }
    Err(ModelLoadError::Unavailable {
        model_id: desc.model_id.clone(),
        detail: format!(
            "no weights at '{}' and nothing under ${MODEL_CACHE_ENV}; \
             builtin editors use weights specs like 'toy:0:4:2'",
            desc.weights
        ),
    })
}

/// The stable identifier a descriptor's model reports: the builtin editor's
/// own id when the spec is builtin, the descriptor's `model_id` otherwise.
pub fn model_label(desc: &ModelDescriptor) -> String {
    if let Some(Ok(spec)) = parse_builtin(&desc.weights) {
        if let Ok(model) = spec.build() {
            return model.info().model_id.clone();
        }
    }
    desc.model_id.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn toy_descriptor(weights: &str, kind: ModelKind) -> ModelDescriptor {
        ModelDescriptor {
            model_id: "test-model".into(),
            kind,
            weights: weights.into(),
            revision: String::new(),
        }
    }

    #[test]
    fn builtin_specs_parse_and_build() {
        let spec = parse_builtin("toy:7:4:2").unwrap().unwrap();
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.channels, 4);
        assert_eq!(spec.steps, 2);
        assert_eq!(spec.kind, ModelKind::Variation);
        assert_eq!(spec.spec_string(), "toy:7:4:2");
        let model = load_model(&toy_descriptor("toy:7:4:2", ModelKind::Variation)).unwrap();
        assert_eq!(model.info().model_id, "toy-var-s7-c4");

        let inpaint = parse_builtin("toy-inpaint:1:2:3").unwrap().unwrap();
        assert_eq!(inpaint.kind, ModelKind::Inpainting);
    }

    #[test]
    fn malformed_builtin_specs_are_rejected() {
        assert!(parse_builtin("toy:1:1:1").unwrap().is_err()); // channels < 2
        assert!(parse_builtin("toy:1:4").unwrap().is_err());
        assert!(parse_builtin("toy:x:4:2").unwrap().is_err());
        assert!(parse_builtin("toy:1:4:0").unwrap().is_err());
        assert!(parse_builtin("sd-v1-5").is_none());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let Err(err) = load_model(&toy_descriptor("toy:1:4:2", ModelKind::Inpainting)) else {
            panic!("kind mismatch loaded anyway");
        };
        assert!(matches!(err, ModelLoadError::InvalidSpec { .. }));
    }

    #[test]
    fn missing_weights_are_unavailable() {
        let desc = toy_descriptor("/nonexistent/sd-v1-5", ModelKind::Variation);
        let Err(err) = load_model(&desc) else {
            panic!("missing weights loaded anyway");
        };
        assert!(matches!(err, ModelLoadError::Unavailable { .. }));
    }

    #[test]
    fn present_checkpoints_are_unsupported_not_faked() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("sd-v1-5");
        fs::create_dir_all(&ckpt).unwrap();
        fs::write(ckpt.join(CHECKPOINT_MARKER), "{}").unwrap();
        let desc = toy_descriptor(ckpt.to_str().unwrap(), ModelKind::Variation);
        let Err(err) = load_model(&desc) else {
            panic!("external checkpoint loaded anyway");
        };
        assert!(matches!(err, ModelLoadError::UnsupportedPipeline { .. }));
    }

    #[test]
    fn model_label_prefers_the_builtin_identity() {
        assert_eq!(
            model_label(&toy_descriptor("toy:3:4:2", ModelKind::Variation)),
            "toy-var-s3-c4"
        );
        assert_eq!(
            model_label(&toy_descriptor("/elsewhere", ModelKind::Variation)),
            "test-model"
        );
    }
}
