//! Core algorithms for measuring the adversarial robustness of latent-diffusion
//! image editors.
//!
//! Everything in this crate is deterministic and allocation-only (`no_std` +
//! `alloc`): given the same seeds and inputs, every function produces
//! bit-identical results. IO, file formats, codecs, and orchestration live in
//! the companion `ldmrb` crate.
//!
//! The crate is organised around a small number of ideas:
//!
//! * [`image`] — flat `f64` RGB images in `[0, 1]` and binary keep-masks.
//! * [`adapter`] — the [`adapter::DiffusionModel`] trait: an image editor that
//!   can expose intermediate module activations ("taps") and differentiate a
//!   feature-distortion loss with respect to its input pixels. A fully
//!   self-contained [`adapter::toy`] editor implements it for tests and desk
//!   experiments.
//! * [`attack`] — L∞-bounded projected gradient ascent that maximises the
//!   distortion of a chosen module's activations.
//! * [`defense`] — input-side purification transforms (resize-and-pad, JPEG
//!   via a pluggable codec, additive Gaussian noise).
//! * [`metrics`] — PSNR / SSIM / MS-SSIM / Fréchet distance / Inception-style
//!   score / prompt-fidelity scoring used to judge whether an edit survived.
//! * [`dataset`] — ranking and prompt-expansion pipelines that turn a
//!   captioned, annotated corpus into editing benchmarks.
//! * [`mock`] — deterministic stand-ins for the scorer / extractor /
//!   classifier clients, for tests and offline runs.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adapter;
pub mod attack;
pub mod dataset;
pub mod defense;
pub mod image;
pub mod metrics;
pub mod mock;
pub mod rng;

mod tape;

pub use adapter::{DiffusionModel, EditRequest, ModelInfo, ModelKind, ModuleTarget, TapRecord};
pub use attack::{AdversarialExample, AttackConfig};
pub use image::{KeepMask, PixelGradient, RgbImage};
