//! IO, file formats, experiment orchestration, and the command-line
//! interface for the `ldmrb` robustness toolkit.
//!
//! The numeric substance — attacks, metrics, defenses, dataset selection —
//! lives in the deterministic [`ldmrb_core`] crate. This companion crate
//! owns everything that touches the outside world:
//!
//! * [`imageio`] / [`codec`] — PNG and JPEG encode/decode at the 8-bit
//!   quantisation boundary.
//! * [`corpus`] — COCO-style annotation loading (polygons and RLE masks)
//!   and a deterministic synthetic corpus generator.
//! * [`llm`] / [`clients`] — transcript-replayable LLM access and the
//!   registry mapping plan identifiers to scorer/extractor/classifier
//!   implementations.
//! * [`manifest`] — benchmark manifests: JSON-Lines rows plus image and
//!   mask files.
//! * [`models`] — builtin deterministic editors and the external weight
//!   cache probe.
//! * [`plan`] / [`artifact`] — experiment plans (hashed for provenance)
//!   and adversarial-example files with audit sidecars.
//! * [`harness`] — the four experiment protocols: white-box sweep,
//!   prompt transfer, model transfer, defended evaluation.
//! * [`report`] — table rendering/parsing (CSV, JSON, Markdown) and
//!   loss-trace plots.
//! * [`cli`] — the `ldmrb` command-line entry points.

pub mod artifact;
pub mod cli;
pub mod clients;
pub mod codec;
pub mod corpus;
pub mod harness;
pub mod imageio;
pub mod llm;
pub mod manifest;
pub mod models;
pub mod plan;
pub mod report;

pub use plan::ExperimentPlan;
