//! Experiment plans: the JSON files that fully determine a run.
//!
//! A plan names the dataset manifest, the source model and any transfer
//! targets, the module targets, the attack configuration, the defense
//! stack, the metrics clients, and every seed. Its SHA-256 hash is stamped
//! into all outputs, so any report cell traces back to the exact plan that
//! produced it.
//!
//! Plans are files; command-line overrides exist for ergonomics only. An
//! override uses a dotted path (`attack.epsilon=0.05`,
//! `target_models.0.weights=toy:3:4:2`) whose head must be a real plan
//! field — unknown keys are rejected before any work starts, as is any
//! leftover unknown field at deserialization time.

use std::fmt;
use std::path::{Path, PathBuf};

use ldmrb_core::adapter::{
    ModelDescriptor, ModuleTarget, DEFAULT_GUIDANCE, DEFAULT_STRENGTH, INFERENCE_DIFFUSION_STEPS,
};
use ldmrb_core::attack::AttackConfig;
use ldmrb_core::defense::DefenseSpec;
use ldmrb_core::rng::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable that re-roots relative plan output directories.
pub const OUTPUT_DIR_ENV: &str = "LDMRB_OUTPUT_DIR";

/// Errors from plan loading, overriding, and validation.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown plan field in override `{0}`")]
    UnknownKey(String),
    #[error("override `{key}`: {detail}")]
    BadOverride { key: String, detail: String },
    #[error("invalid plan: {0}")]
    Invalid(String),
}

/// Which image set anchors the FID statistics in adversarial conditions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidReference {
    /// The benign generated edits (default).
    #[default]
    BenignGenerations,
    /// The unedited source images.
    SourceImages,
}

/// How the prompt-transfer protocol crafts its adversarial inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTransferLegs {
    /// Circulate every leg: craft with prompt `i`, evaluate with prompt
    /// `i+1` (mod the prompt count), for all `i` (default).
    #[default]
    All,
    /// Only the first leg — craft with prompt 0 (reusing the white-box
    /// artifacts byte-for-byte), evaluate with prompt 1.
    FirstOnly,
}

/// One defense entry as it appears in a plan file:
/// `{"variant": "jpeg", "params": {"quality": 80}, "seed": 7}`.
///
/// `params` defaults to the variant's standard parameters; `seed` is the
/// base from which per-item defense randomness derives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseEntry {
    pub variant: String,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseEntry {
    /// An entry with the variant's default parameters.
    pub fn new(variant: &str, seed: u64) -> Self {
        Self {
            variant: variant.to_string(),
            params: Value::Null,
            seed,
        }
    }

    /// Resolves to the concrete defense, applying `params` over the
    /// variant's defaults. Unknown variants and unknown parameter names
    /// are errors.
    pub fn spec(&self) -> Result<DefenseSpec, PlanError> {
        let base = match self.variant.as_str() {
            "resize-pad" => DefenseSpec::resize_pad(),
            "jpeg" => DefenseSpec::jpeg(),
            "gaussian-noise" => DefenseSpec::gaussian_noise(),
            other => {
                return Err(PlanError::Invalid(format!(
                    "unknown defense variant `{other}` (expected resize-pad, jpeg, or gaussian-noise)"
                )))
            }
        };
        let mut merged = match serde_json::to_value(&base) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("defense specs serialize to objects"),
        };
        match &self.params {
            Value::Null => {}
            Value::Object(params) => {
                for (key, value) in params {
                    if key == "kind" || !merged.contains_key(key) {
                        return Err(PlanError::Invalid(format!(
                            "defense `{}` has no parameter `{key}`",
                            self.variant
                        )));
                    }
                    merged.insert(key.clone(), value.clone());
                }
            }
            _ => {
                return Err(PlanError::Invalid(format!(
                    "defense `{}` params must be an object",
                    self.variant
                )))
            }
        }
        let spec: DefenseSpec =
            serde_json::from_value(Value::Object(merged)).map_err(|e| PlanError::Parse {
                context: format!("defense `{}`", self.variant),
                source: e,
            })?;
        spec.validate()
            .map_err(|e| PlanError::Invalid(e.to_string()))?;
        Ok(spec)
    }
}

/// A complete experiment description; see the module docs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Dataset manifest directory.
    pub dataset: String,
    /// The model attacks are crafted on.
    pub source_model: ModelDescriptor,
    /// Additional evaluation targets for the transfer matrix.
    #[serde(default)]
    pub target_models: Vec<ModelDescriptor>,
    /// Module targets to attack, in report row order.
    pub modules: Vec<ModuleTarget>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defenses: Vec<DefenseEntry>,
    /// Edit-quality scorer client id.
    #[serde(default = "default_scorer")]
    pub scorer: String,
    /// Feature-extractor client id (drives FID).
    #[serde(default = "default_extractor")]
    pub extractor: String,
    /// Probability-classifier client id (drives IS).
    #[serde(default = "default_classifier")]
    pub classifier: String,
    #[serde(default)]
    pub fid_reference: FidReference,
    /// Output directory; relative paths resolve under [`OUTPUT_DIR_ENV`].
    pub output_dir: String,
    /// Base seed for attack crafting.
    #[serde(default)]
    pub seed: u64,
    /// Base seed for evaluation-time regeneration. When absent it derives
    /// from `seed`, so a single seed override still steers every seeded
    /// operation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_seed: Option<u64>,
    /// Denoising steps for evaluation-quality edits.
    #[serde(default = "default_inference_steps")]
    pub inference_steps: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// Fraction of (condition, item) cells allowed to skip before the run
    /// fails.
    #[serde(default = "default_skip_threshold")]
    pub skip_threshold: f64,
    /// Worker threads for item-level parallelism.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub prompt_transfer_legs: PromptTransferLegs,
}

fn default_scorer() -> String {
    "mock-scorer".to_string()
}
fn default_extractor() -> String {
    "mock-extractor".to_string()
}
fn default_classifier() -> String {
    "mock-classifier".to_string()
}
fn default_inference_steps() -> usize {
    INFERENCE_DIFFUSION_STEPS
}
fn default_strength() -> f64 {
    DEFAULT_STRENGTH
}
fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}
fn default_skip_threshold() -> f64 {
    0.10
}
fn default_workers() -> usize {
    1
}

/// Top-level plan field names, used to reject unknown override heads
/// before any work starts.
const PLAN_FIELDS: [&str; 19] = [
    "dataset",
    "source_model",
    "target_models",
    "modules",
    "attack",
    "defenses",
    "scorer",
    "extractor",
    "classifier",
    "fid_reference",
    "output_dir",
    "seed",
    "eval_seed",
    "inference_steps",
    "strength",
    "guidance",
    "skip_threshold",
    "workers",
    "prompt_transfer_legs",
];

impl ExperimentPlan {
    /// A minimal valid plan around one model, with protocol defaults.
    pub fn new(dataset: &str, source_model: ModelDescriptor, output_dir: &str) -> Self {
        Self {
            dataset: dataset.to_string(),
            source_model,
            target_models: Vec::new(),
            modules: ModuleTarget::MODULES.to_vec(),
            attack: AttackConfig::default(),
            defenses: Vec::new(),
            scorer: default_scorer(),
            extractor: default_extractor(),
            classifier: default_classifier(),
            fid_reference: FidReference::default(),
            output_dir: output_dir.to_string(),
            seed: 0,
            eval_seed: None,
            inference_steps: default_inference_steps(),
            strength: default_strength(),
            guidance: default_guidance(),
            skip_threshold: default_skip_threshold(),
            workers: default_workers(),
            prompt_transfer_legs: PromptTransferLegs::default(),
        }
    }

    /// The evaluation base seed: the explicit field, or a fixed derivation
    /// from the attack seed — always distinct from `seed` itself.
    #[must_use]
    pub fn effective_eval_seed(&self) -> u64 {
        self.eval_seed
            .unwrap_or_else(|| derive_seed(self.seed, "evaluation"))
    }

    /// SHA-256 over the plan's scientific content, stamped into every
    /// output this plan produces. Execution routing — `output_dir`,
    /// `workers`, `skip_threshold` — is excluded: none of it can change a
    /// produced byte, so the same experiment run into another directory or
    /// at another parallelism keeps the same hash (and reuses the same
    /// crafted artifacts).
    #[must_use]
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("plan always serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("workers");
            map.remove("skip_threshold");
        }
        let json = serde_json::to_string(&value).expect("json values serialize");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Structural validation: ranges and shape only. Filesystem and client
    /// availability are checked where they are used.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.dataset.is_empty() {
            return Err(PlanError::Invalid("dataset path is empty".into()));
        }
        if self.output_dir.is_empty() {
            return Err(PlanError::Invalid("output_dir is empty".into()));
        }
        if self.modules.is_empty() {
            return Err(PlanError::Invalid("modules list is empty".into()));
        }
        for (i, module) in self.modules.iter().enumerate() {
            if self.modules[..i].contains(module) {
                return Err(PlanError::Invalid(format!(
                    "module `{}` listed twice",
                    module.name()
                )));
            }
        }
        for descriptor in
            std::iter::once(&self.source_model).chain(self.target_models.iter())
        {
            if descriptor.model_id.is_empty() {
                return Err(PlanError::Invalid("model_id is empty".into()));
            }
            if descriptor.weights.is_empty() {
                return Err(PlanError::Invalid(format!(
                    "model `{}` has no weight source",
                    descriptor.model_id
                )));
            }
        }
        self.attack
            .validate()
            .map_err(|e| PlanError::Invalid(e.to_string()))?;
        for entry in &self.defenses {
            entry.spec()?;
        }
        for (name, id) in [
            ("scorer", &self.scorer),
            ("extractor", &self.extractor),
            ("classifier", &self.classifier),
        ] {
            if id.is_empty() {
                return Err(PlanError::Invalid(format!("{name} id is empty")));
            }
        }
        if self.inference_steps == 0 {
            return Err(PlanError::Invalid("inference_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(PlanError::Invalid(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(PlanError::Invalid(format!(
                "guidance {} must be finite and non-negative",
                self.guidance
            )));
        }
        if !(0.0..=1.0).contains(&self.skip_threshold) {
            return Err(PlanError::Invalid(format!(
                "skip_threshold {} outside [0, 1]",
                self.skip_threshold
            )));
        }
        if self.workers == 0 {
            return Err(PlanError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// The output directory, re-rooted under [`OUTPUT_DIR_ENV`] when that
    /// is set and the plan's path is relative.
    #[must_use]
    pub fn resolve_output_dir(&self) -> PathBuf {
        let dir = PathBuf::from(&self.output_dir);
        if dir.is_relative() {
            if let Ok(root) = std::env::var(OUTPUT_DIR_ENV) {
                if !root.is_empty() {
                    return PathBuf::from(root).join(dir);
                }
            }
        }
        dir
    }
}

/// Reads a plan file into a raw JSON value (overrides apply to this).
pub fn load_plan_value(path: &Path) -> Result<Value, PlanError> {
    let text = std::fs::read_to_string(path).map_err(|e| PlanError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| PlanError::Parse {
        context: path.display().to_string(),
        source: e,
    })
}

/// Finishes a raw value into a validated plan. Unknown fields anywhere in
/// the value are rejected.
pub fn plan_from_value(value: Value) -> Result<ExperimentPlan, PlanError> {
    let plan: ExperimentPlan =
        serde_json::from_value(value).map_err(|e| PlanError::Parse {
            context: "plan".to_string(),
            source: e,
        })?;
    plan.validate()?;
    Ok(plan)
}

fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `key=value` override to a raw plan value.
///
/// The key is a dotted path; the first segment must name a plan field.
/// Values parse as JSON when possible (`0.05`, `true`, `["encoder"]`,
/// `{"quality": 80}`) and fall back to plain strings. Numeric segments
/// index into arrays and must be in range; intermediate objects are
/// created as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), PlanError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        PlanError::BadOverride {
            key: assignment.to_string(),
            detail: "expected key=value".to_string(),
        }
    })?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(PlanError::BadOverride {
            key: key.to_string(),
            detail: "empty path segment".to_string(),
        });
    }
    if !PLAN_FIELDS.contains(&segments[0]) {
        return Err(PlanError::UnknownKey(key.to_string()));
    }
    if !root.is_object() {
        return Err(PlanError::Invalid("plan file is not a JSON object".into()));
    }
    let mut cursor = root;
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match cursor {
            Value::Object(map) => {
                if last {
                    map.insert((*segment).to_string(), parse_override_value(raw));
                    return Ok(());
                }
                cursor = map
                    .entry((*segment).to_string())
                    .or_insert_with(|| Value::Object(serde_json::Map::new()));
            }
            Value::Array(items) => {
                let index: usize =
                    segment.parse().map_err(|_| PlanError::BadOverride {
                        key: key.to_string(),
                        detail: format!("`{segment}` is not an array index"),
                    })?;
                let len = items.len();
                let slot = items.get_mut(index).ok_or(PlanError::BadOverride {
                    key: key.to_string(),
                    detail: format!("index {index} out of range (length {len})"),
                })?;
                if last {
                    *slot = parse_override_value(raw);
                    return Ok(());
                }
                cursor = slot;
            }
            other => {
                return Err(PlanError::BadOverride {
                    key: key.to_string(),
                    detail: format!(
                        "`{}` is a {} value, not an object",
                        segments[..i].join("."),
                        json_type_name(other)
                    ),
                });
            }
        }
    }
    unreachable!("loop returns on the last segment");
}

fn json_type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

impl fmt::Display for FidReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FidReference::BenignGenerations => "benign_generations",
            FidReference::SourceImages => "source_images",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldmrb_core::adapter::ModelKind;

    fn toy_plan() -> ExperimentPlan {
        ExperimentPlan::new(
            "data/variation",
            ModelDescriptor {
                model_id: "toy-var-s0-c4".into(),
                kind: ModelKind::Variation,
                weights: "toy:0:4:2".into(),
                revision: String::new(),
            },
            "out/run",
        )
    }

    #[test]
    fn plan_round_trips_and_hash_is_stable() {
        let plan = toy_plan();
        plan.validate().unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: ExperimentPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.hash(), plan.hash());
        assert_eq!(plan.hash().len(), 64);

        let mut other = plan.clone();
        other.seed = 1;
        assert_ne!(other.hash(), plan.hash());

        // Routing fields never change a produced byte, so they are outside
        // the hash: the identical experiment keeps its identity across
        // directories and worker counts.
        let mut routed = plan.clone();
        routed.output_dir = "elsewhere/run".into();
        routed.workers = 8;
        routed.skip_threshold = 0.5;
        assert_eq!(routed.hash(), plan.hash());
    }

    #[test]
    fn defaults_fill_in_for_a_minimal_file() {
        let value: Value = serde_json::from_str(
            r#"{
                "dataset": "data/variation",
                "source_model": {
                    "model_id": "m", "kind": "variation", "weights": "toy:0:4:2"
                },
                "modules": ["encoder", "self-attn"],
                "output_dir": "out"
            }"#,
        )
        .unwrap();
        let plan = plan_from_value(value).unwrap();
        assert_eq!(plan.inference_steps, 100);
        assert_eq!(plan.strength, 0.7);
        assert_eq!(plan.guidance, 7.5);
        assert_eq!(plan.skip_threshold, 0.10);
        assert_eq!(plan.workers, 1);
        assert_eq!(plan.scorer, "mock-scorer");
        assert_eq!(plan.fid_reference, FidReference::BenignGenerations);
        assert_eq!(plan.prompt_transfer_legs, PromptTransferLegs::All);
        assert_eq!(
            plan.modules,
            [ModuleTarget::Encoder, ModuleTarget::SelfAttn]
        );
        // The derived evaluation seed is fixed and distinct from the
        // attack seed.
        assert_ne!(plan.effective_eval_seed(), plan.seed);
        assert_eq!(plan.effective_eval_seed(), plan.effective_eval_seed());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let value: Value = serde_json::from_str(
            r#"{
                "dataset": "d",
                "source_model": {
                    "model_id": "m", "kind": "variation", "weights": "toy:0:4:2"
                },
                "modules": ["encoder"],
                "output_dir": "out",
                "epsilonn": 0.2
            }"#,
        )
        .unwrap();
        let err = plan_from_value(value).unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
    }

    #[test]
    fn overrides_apply_and_reject_unknown_heads() {
        let mut value = serde_json::to_value(toy_plan()).unwrap();
        apply_override(&mut value, "attack.epsilon=0.05").unwrap();
        apply_override(&mut value, "seed=9").unwrap();
        apply_override(&mut value, "modules=[\"unet\"]").unwrap();
        apply_override(&mut value, "dataset=data/other").unwrap();
        let plan = plan_from_value(value).unwrap();
        assert_eq!(plan.attack.epsilon, 0.05);
        assert_eq!(plan.seed, 9);
        assert_eq!(plan.modules, [ModuleTarget::Unet]);
        assert_eq!(plan.dataset, "data/other");

        let mut value = serde_json::to_value(toy_plan()).unwrap();
        assert!(matches!(
            apply_override(&mut value, "epsilon=0.05"),
            Err(PlanError::UnknownKey(_))
        ));
        assert!(matches!(
            apply_override(&mut value, "attack.epsilon"),
            Err(PlanError::BadOverride { .. })
        ));
    }

    #[test]
    fn overrides_index_into_arrays() {
        let mut plan = toy_plan();
        plan.target_models.push(plan.source_model.clone());
        let mut value = serde_json::to_value(&plan).unwrap();
        apply_override(&mut value, "target_models.0.weights=toy:5:4:2").unwrap();
        let plan = plan_from_value(value).unwrap();
        assert_eq!(plan.target_models[0].weights, "toy:5:4:2");

        let mut value = serde_json::to_value(&plan).unwrap();
        assert!(matches!(
            apply_override(&mut value, "target_models.7.weights=x"),
            Err(PlanError::BadOverride { .. })
        ));
    }

    #[test]
    fn validation_catches_range_errors() {
        let mut plan = toy_plan();
        plan.attack.epsilon = 1.5;
        assert!(plan.validate().is_err());

        let mut plan = toy_plan();
        plan.modules.push(ModuleTarget::Encoder);
        assert!(plan.validate().is_err());

        let mut plan = toy_plan();
        plan.skip_threshold = 1.2;
        assert!(plan.validate().is_err());

        let mut plan = toy_plan();
        plan.workers = 0;
        assert!(plan.validate().is_err());

        let mut plan = toy_plan();
        plan.modules.clear();
        assert!(plan.validate().is_err());
    }

    #[test]
    fn defense_entries_resolve_with_defaults_and_params() {
        let entry = DefenseEntry::new("jpeg", 3);
        assert_eq!(entry.spec().unwrap(), DefenseSpec::jpeg());

        let with_params = DefenseEntry {
            variant: "jpeg".into(),
            params: serde_json::json!({"quality": 40}),
            seed: 0,
        };
        assert_eq!(
            with_params.spec().unwrap(),
            DefenseSpec::Jpeg { quality: 40 }
        );

        let unknown_param = DefenseEntry {
            variant: "jpeg".into(),
            params: serde_json::json!({"sigma": 0.1}),
            seed: 0,
        };
        assert!(unknown_param.spec().is_err());

        let unknown_variant = DefenseEntry::new("median-filter", 0);
        assert!(unknown_variant.spec().is_err());

        let bad_range = DefenseEntry {
            variant: "gaussian-noise".into(),
            params: serde_json::json!({"sigma": -1.0}),
            seed: 0,
        };
        assert!(bad_range.spec().is_err());
    }

    #[test]
    fn defense_entries_serialize_as_variant_params_seed() {
        let entry = DefenseEntry {
            variant: "resize-pad".into(),
            params: serde_json::json!({"max_expand": 0.2}),
            seed: 11,
        };
        let json = serde_json::to_value(&entry).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "variant": "resize-pad",
                "params": {"max_expand": 0.2},
                "seed": 11
            })
        );
        assert_eq!(
            entry.spec().unwrap(),
            DefenseSpec::ResizePad { max_expand: 0.2 }
        );
    }

    #[test]
    fn fid_reference_uses_snake_case_tokens() {
        assert_eq!(
            serde_json::to_value(FidReference::BenignGenerations).unwrap(),
            Value::String("benign_generations".into())
        );
        assert_eq!(
            serde_json::from_value::<FidReference>(Value::String("source_images".into()))
                .unwrap(),
            FidReference::SourceImages
        );
    }

    #[test]
    fn output_dir_resolution_respects_the_environment_root() {
        // Absolute paths never move.
        let mut plan = toy_plan();
        plan.output_dir = "/abs/run".into();
        assert_eq!(plan.resolve_output_dir(), PathBuf::from("/abs/run"));
        // Relative without the variable: unchanged. (The env-set branch is
        // covered by command-line integration tests to keep this process's
        // environment stable.)
        let plan = toy_plan();
        assert!(plan.resolve_output_dir().is_relative() || std::env::var(OUTPUT_DIR_ENV).is_ok());
    }
}
