//! Client registry: resolves the identifier strings carried in plans and
//! CLI flags to concrete scorer / extractor / classifier / LLM instances.
//!
//! The deterministic mock clients always resolve; identifiers naming real
//! externally-hosted models resolve to an honest "unavailable" error rather
//! than a silent stand-in.

use std::path::Path;

use ldmrb_core::dataset::LlmClient;
use ldmrb_core::metrics::{ClientError, FeatureExtractor, ProbClassifier, ScorerClient};
use ldmrb_core::mock::{MockClassifier, MockExtractor, MockLlm, MockScorer};

use crate::llm::{CachingLlm, ExecLlm, ReplayLlm};

/// Builds an image/text agreement scorer.
///
/// Known ids: `mock-scorer`.
pub fn build_scorer(id: &str) -> Result<Box<dyn ScorerClient>, ClientError> {
    match id {
        "mock-scorer" => Ok(Box::new(MockScorer::new())),
        other => Err(ClientError::Unavailable(format!(
            "unknown scorer '{other}' (available: mock-scorer); \
             hosted scorers need their own service configuration"
        ))),
    }
}

/// Builds a feature extractor for distributional metrics.
///
/// Known ids: `mock-extractor` (4-dimensional) and `mock-extractor-d<N>`.
pub fn build_extractor(id: &str) -> Result<Box<dyn FeatureExtractor>, ClientError> {
    if id == "mock-extractor" {
        return Ok(Box::new(MockExtractor::default()));
    }
    if let Some(dim) = id.strip_prefix("mock-extractor-d") {
        let dim: usize = dim
            .parse()
            .map_err(|_| ClientError::Unavailable(format!("bad extractor dimension in '{id}'")))?;
        if dim == 0 {
            return Err(ClientError::Unavailable(format!(
                "extractor dimension in '{id}' must be positive"
            )));
        }
        return Ok(Box::new(MockExtractor::new(dim)));
    }
    Err(ClientError::Unavailable(format!(
        "unknown extractor '{id}' (available: mock-extractor, mock-extractor-d<N>)"
    )))
}

/// Builds a class-probability model for the inception-style score.
///
/// Known ids: `mock-classifier` (10 classes) and `mock-classifier-k<N>`.
pub fn build_classifier(id: &str) -> Result<Box<dyn ProbClassifier>, ClientError> {
    if id == "mock-classifier" {
        return Ok(Box::new(MockClassifier::new(10)));
    }
    if let Some(classes) = id.strip_prefix("mock-classifier-k") {
        let classes: usize = classes
            .parse()
            .map_err(|_| ClientError::Unavailable(format!("bad class count in '{id}'")))?;
        if classes < 2 {
            return Err(ClientError::Unavailable(format!(
                "class count in '{id}' must be at least 2"
            )));
        }
        return Ok(Box::new(MockClassifier::new(classes)));
    }
    Err(ClientError::Unavailable(format!(
        "unknown classifier '{id}' (available: mock-classifier, mock-classifier-k<N>)"
    )))
}

/// Builds a prompt-expansion language client from a spec string:
///
/// * `mock` — the deterministic builtin;
/// * `replay:<path>` — transcript replay, fully offline;
/// * `exec:<command line>` — subprocess bridge (opt-in live mode).
///
/// When `cache` names a transcript file, the client is wrapped so every
/// exchange is recorded there and replayed from there on later runs.
pub fn build_llm(spec: &str, cache: Option<&Path>) -> Result<Box<dyn LlmClient>, ClientError> {
    let inner: Box<dyn LlmClient> = if spec == "mock" {
        Box::new(MockLlm::new())
    } else if let Some(path) = spec.strip_prefix("replay:") {
        Box::new(ReplayLlm::from_path(Path::new(path))?)
    } else if let Some(cmd) = spec.strip_prefix("exec:") {
        Box::new(ExecLlm::new(cmd)?)
    } else {
        return Err(ClientError::Unavailable(format!(
            "unknown llm spec '{spec}' (available: mock, replay:<path>, exec:<command>)"
        )));
    };
    match cache {
        Some(path) => Ok(Box::new(CachingLlm::new(inner, path)?)),
        None => Ok(inner),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_ids_resolve() {
        assert_eq!(build_scorer("mock-scorer").unwrap().id(), "mock-scorer");
        assert_eq!(build_extractor("mock-extractor").unwrap().dim(), 4);
        assert_eq!(build_extractor("mock-extractor-d7").unwrap().dim(), 7);
        assert_eq!(build_classifier("mock-classifier").unwrap().classes(), 10);
        assert_eq!(build_classifier("mock-classifier-k3").unwrap().classes(), 3);
    }

    #[test]
    fn unknown_ids_are_unavailable_not_substituted() {
        assert!(build_scorer("clip-vit-large").is_err());
        assert!(build_extractor("inception-v3").is_err());
        assert!(build_classifier("inception-v3").is_err());
        assert!(build_llm("gpt-4", None).is_err());
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(build_extractor("mock-extractor-d0").is_err());
        assert!(build_extractor("mock-extractor-dx").is_err());
        assert!(build_classifier("mock-classifier-k1").is_err());
    }

    #[test]
    fn llm_specs_resolve() {
        assert!(build_llm("mock", None).is_ok());
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache.json");
        let mut cached = build_llm("mock", Some(&cache)).unwrap();
        let response = cached.complete("Please modify the following sentence <a cat> \
             to generate 5 similar scenes without changing the entities.");
        assert!(response.is_ok());
        assert!(cache.is_file());
    }
}
