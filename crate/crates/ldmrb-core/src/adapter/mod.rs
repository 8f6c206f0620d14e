//! The model-adapter layer: a uniform interface over latent-diffusion image
//! editors.
//!
//! An adapter exposes three things the rest of the toolkit needs:
//!
//! 1. **Edits** — run the full image→image pipeline for an
//!    [`EditRequest`], optionally recording "taps": snapshots of named
//!    internal module activations ([`TapRecord`]).
//! 2. **Gradients** — differentiate a feature-distortion loss (the summed
//!    Euclidean distances between current and reference taps of one module)
//!    with respect to the input pixels.
//! 3. **Metadata** — [`ModelInfo`] describing pipeline kind, latent
//!    downsample factor, and whether taps/gradients are available.
//!
//! The [`toy`] submodule provides a small, fully deterministic,
//! self-contained editor implementing the whole contract, which the tests
//! and desk experiments use in place of a GPU-scale model.

pub mod toy;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, KeepMask, PixelGradient, RgbImage};

/// Default edit strength: how far the latent is pushed toward fresh noise.
pub const DEFAULT_STRENGTH: f64 = 0.7;
/// Default classifier-free-guidance scale.
pub const DEFAULT_GUIDANCE: f64 = 7.5;
/// Denoising steps used while crafting attacks (cheap, coarse schedule).
pub const ATTACK_DIFFUSION_STEPS: usize = 15;
/// Denoising steps used for final inference-quality generation.
pub const INFERENCE_DIFFUSION_STEPS: usize = 100;

/// An attackable module inside the editing pipeline, or a coarser process
/// group that resolves to a representative module.
///
/// The eight concrete modules follow the pipeline order: the VAE encoder, the
/// post-encoder quantization projection, the denoiser's residual /
/// self-attention / cross-attention / feed-forward blocks, the pre-decoder
/// projection, and the VAE decoder. The three process groups name whole
/// stages and resolve to one representative module each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleTarget {
    Encoder,
    Quant,
    Resnet,
    SelfAttn,
    CrossAttn,
    FeedForward,
    PostQuant,
    Decoder,
    /// Process group: the encoding stage. Resolves to [`ModuleTarget::Encoder`].
    Encoding,
    /// Process group: the denoising stage. Resolves to [`ModuleTarget::Resnet`].
    Unet,
    /// Process group: the decoding stage. Resolves to [`ModuleTarget::PostQuant`].
    Decoding,
}

impl ModuleTarget {
    /// The eight concrete modules in pipeline order.
    pub const MODULES: [ModuleTarget; 8] = [
        ModuleTarget::Encoder,
        ModuleTarget::Quant,
        ModuleTarget::Resnet,
        ModuleTarget::SelfAttn,
        ModuleTarget::CrossAttn,
        ModuleTarget::FeedForward,
        ModuleTarget::PostQuant,
        ModuleTarget::Decoder,
    ];

    /// The three process groups.
    pub const GROUPS: [ModuleTarget; 3] = [
        ModuleTarget::Encoding,
        ModuleTarget::Unet,
        ModuleTarget::Decoding,
    ];

    /// True for the coarse process groups, false for concrete modules.
    #[must_use]
    pub fn is_process_group(self) -> bool {
        matches!(
            self,
            ModuleTarget::Encoding | ModuleTarget::Unet | ModuleTarget::Decoding
        )
    }

    /// Maps process groups to their representative concrete module; concrete
    /// modules map to themselves.
    #[must_use]
    pub fn resolve(self) -> ModuleTarget {
        match self {
            ModuleTarget::Encoding => ModuleTarget::Encoder,
            ModuleTarget::Unet => ModuleTarget::Resnet,
            ModuleTarget::Decoding => ModuleTarget::PostQuant,
            concrete => concrete,
        }
    }

    /// True for modules that run once per denoising step (and therefore
    /// produce one tap per step).
    #[must_use]
    pub fn is_denoiser_block(self) -> bool {
        matches!(
            self.resolve(),
            ModuleTarget::Resnet
                | ModuleTarget::SelfAttn
                | ModuleTarget::CrossAttn
                | ModuleTarget::FeedForward
        )
    }

    /// Stable textual name, matching the serialized form.
    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            ModuleTarget::Encoder => "encoder",
            ModuleTarget::Quant => "quant",
            ModuleTarget::Resnet => "resnet",
            ModuleTarget::SelfAttn => "self-attn",
            ModuleTarget::CrossAttn => "cross-attn",
            ModuleTarget::FeedForward => "feed-forward",
            ModuleTarget::PostQuant => "post-quant",
            ModuleTarget::Decoder => "decoder",
            ModuleTarget::Encoding => "encoding",
            ModuleTarget::Unet => "unet",
            ModuleTarget::Decoding => "decoding",
        }
    }

    /// Parses the textual name produced by [`ModuleTarget::name`].
    pub fn parse(s: &str) -> Option<ModuleTarget> {
        let all = [
            ModuleTarget::Encoder,
            ModuleTarget::Quant,
            ModuleTarget::Resnet,
            ModuleTarget::SelfAttn,
            ModuleTarget::CrossAttn,
            ModuleTarget::FeedForward,
            ModuleTarget::PostQuant,
            ModuleTarget::Decoder,
            ModuleTarget::Encoding,
            ModuleTarget::Unet,
            ModuleTarget::Decoding,
        ];
        all.into_iter().find(|t| t.name() == s)
    }
}

impl core::fmt::Display for ModuleTarget {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Editing pipeline kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Whole-image variation editing; requests must not carry a mask.
    Variation,
    /// Mask-conditioned inpainting; requests must carry a keep-mask.
    Inpainting,
}

/// Static description of a loaded model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    /// Stable identifier, used in reports and cache paths.
    pub model_id: String,
    pub kind: ModelKind,
    /// Pixel-to-latent spatial downsampling factor; input dimensions must be
    /// divisible by it.
    pub downsample_factor: usize,
    /// Whether [`DiffusionModel::loss_and_gradient`] is available.
    pub differentiable: bool,
    /// Whether [`DiffusionModel::run_edit`] can record taps.
    pub tap_capable: bool,
}

/// A snapshot of one module's activations at one denoising step.
///
/// `values` is the flattened activation buffer in the layout the model
/// computed it in; pairing only requires that reference and current taps
/// came from the same model, module, and step. Modules outside the denoising
/// loop always report `step_index == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapRecord {
    pub target: ModuleTarget,
    pub step_index: usize,
    pub values: Vec<f64>,
}

/// One image-editing job.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: RgbImage,
    pub prompt: String,
    /// Required for inpainting models, forbidden for variation models.
    pub mask: Option<KeepMask>,
    /// Denoising steps; `None` uses the model's build-time default.
    pub diffusion_steps: Option<usize>,
    /// Edit strength in `(0, 1]`.
    pub strength: f64,
    /// Guidance scale, must be positive.
    pub guidance: f64,
    /// Seed for the latent noise draw.
    pub seed: u64,
}

impl EditRequest {
    /// A request with default strength, guidance, steps, and seed 0.
    #[must_use]
    pub fn new(image: RgbImage, prompt: impl Into<String>) -> Self {
        Self {
            image,
            prompt: prompt.into(),
            mask: None,
            diffusion_steps: None,
            strength: DEFAULT_STRENGTH,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }

    #[must_use]
    pub fn with_mask(mut self, mask: KeepMask) -> Self {
        self.mask = Some(mask);
        self
    }

    #[must_use]
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.diffusion_steps = Some(steps);
        self
    }

    #[must_use]
    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }

    #[must_use]
    pub fn with_guidance(mut self, guidance: f64) -> Self {
        self.guidance = guidance;
        self
    }

    #[must_use]
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Same request with a different input image (prompt, mask, and sampling
    /// parameters unchanged).
    #[must_use]
    pub fn with_image(mut self, image: RgbImage) -> Self {
        self.image = image;
        self
    }
}

/// Result of [`DiffusionModel::run_edit`]: the edited image plus any
/// requested taps, in forward order.
#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: RgbImage,
    pub taps: Vec<TapRecord>,
}

/// Errors from model adapters.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    /// The model does not expose the requested module.
    #[error("model '{model_id}' does not expose module '{target}'")]
    UnsupportedTarget {
        model_id: String,
        target: ModuleTarget,
    },
    /// Input dimensions are incompatible with the latent grid.
    #[error("image {h}x{w} is not divisible by the downsample factor {factor} (minimum {min} per side)")]
    DimensionMismatch {
        h: usize,
        w: usize,
        factor: usize,
        min: usize,
    },
    /// Inpainting models require a mask.
    #[error("inpainting model requires a keep-mask")]
    MaskRequired,
    /// Variation models must not receive a mask.
    #[error("variation model does not accept a keep-mask")]
    MaskForbidden,
    /// The mask does not match the image dimensions.
    #[error("mask {mask_h}x{mask_w} does not match image {h}x{w}")]
    MaskMismatch {
        mask_h: usize,
        mask_w: usize,
        h: usize,
        w: usize,
    },
    /// Reference taps do not pair with the model's own taps.
    #[error("reference taps do not match current activations: {0}")]
    ShapeMismatch(String),
    /// The model cannot provide pixel gradients.
    #[error("model '{model_id}' is not differentiable")]
    NonDifferentiable { model_id: String },
    /// The model cannot record taps.
    #[error("model '{model_id}' cannot record module taps")]
    TapsUnavailable { model_id: String },
    /// A request or build parameter violates its documented range.
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// The model's weights are not present locally.
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
    /// No backend is registered for the descriptor's pipeline kind.
    #[error("unsupported pipeline: {0}")]
    UnsupportedPipeline(String),
    /// An invalid image or mask was produced or supplied.
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// A loaded latent-diffusion image editor.
///
/// Methods take `&mut self`: a handle is a single-consumer resource, and
/// callers that want parallelism hold one handle per worker.
pub trait DiffusionModel {
    /// Static model metadata.
    fn info(&self) -> &ModelInfo;

    /// Runs the edit, recording taps for each requested target (process
    /// groups are resolved first; duplicates are recorded once). An empty
    /// `taps` slice is a plain generation.
    fn run_edit(
        &mut self,
        request: &EditRequest,
        taps: &[ModuleTarget],
    ) -> Result<EditOutput, AdapterError>;

    /// Computes the feature-distortion loss for `target` against `reference`
    /// taps, together with its gradient with respect to the input pixels.
    fn loss_and_gradient(
        &mut self,
        request: &EditRequest,
        target: ModuleTarget,
        reference: &[TapRecord],
    ) -> Result<(f64, PixelGradient), AdapterError>;

    /// Gradient-only convenience wrapper around
    /// [`DiffusionModel::loss_and_gradient`].
    fn loss_gradient(
        &mut self,
        request: &EditRequest,
        target: ModuleTarget,
        reference: &[TapRecord],
    ) -> Result<PixelGradient, AdapterError> {
        self.loss_and_gradient(request, target, reference)
            .map(|(_, g)| g)
    }
}

/// A serializable description of a model to load: identifier, pipeline kind,
/// weight location, and revision pin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub kind: ModelKind,
    /// Weight source: a path, a registry address, or a builtin spec such as
    /// `toy:<seed>:<channels>:<steps>`.
    pub weights: String,
    /// Revision pin for remote weights; free-form.
    #[serde(default)]
    pub revision: String,
}

/// Validates the request against model metadata: dimension divisibility,
/// mask presence, and sampling-parameter ranges.
pub fn validate_request(info: &ModelInfo, request: &EditRequest) -> Result<(), AdapterError> {
    let (h, w) = (request.image.height(), request.image.width());
    let factor = info.downsample_factor;
    let min = 2 * factor;
    if h < min || w < min || h % factor != 0 || w % factor != 0 {
        return Err(AdapterError::DimensionMismatch { h, w, factor, min });
    }
    match (info.kind, &request.mask) {
        (ModelKind::Inpainting, None) => return Err(AdapterError::MaskRequired),
        (ModelKind::Variation, Some(_)) => return Err(AdapterError::MaskForbidden),
        (ModelKind::Inpainting, Some(mask)) => {
            if mask.height() != h || mask.width() != w {
                return Err(AdapterError::MaskMismatch {
                    mask_h: mask.height(),
                    mask_w: mask.width(),
                    h,
                    w,
                });
            }
        }
        (ModelKind::Variation, None) => {}
    }
    if !(request.strength > 0.0 && request.strength <= 1.0) {
        return Err(AdapterError::InvalidRequest(alloc::format!(
            "strength {} outside (0, 1]",
            request.strength
        )));
    }
    if !(request.guidance > 0.0) {
        return Err(AdapterError::InvalidRequest(alloc::format!(
            "guidance {} must be positive",
            request.guidance
        )));
    }
    if request.diffusion_steps == Some(0) {
        return Err(AdapterError::InvalidRequest(
            "diffusion_steps must be at least 1".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn process_groups_resolve_to_representatives() {
        assert_eq!(ModuleTarget::Encoding.resolve(), ModuleTarget::Encoder);
        assert_eq!(ModuleTarget::Unet.resolve(), ModuleTarget::Resnet);
        assert_eq!(ModuleTarget::Decoding.resolve(), ModuleTarget::PostQuant);
        for m in ModuleTarget::MODULES {
            assert_eq!(m.resolve(), m);
            assert!(!m.is_process_group());
        }
        for g in ModuleTarget::GROUPS {
            assert!(g.is_process_group());
            assert!(!g.resolve().is_process_group());
        }
    }

    #[test]
    fn module_names_round_trip() {
        for t in ModuleTarget::MODULES.into_iter().chain(ModuleTarget::GROUPS) {
            assert_eq!(ModuleTarget::parse(t.name()), Some(t));
        }
        assert_eq!(ModuleTarget::parse("bogus"), None);
    }

    #[test]
    fn serde_names_are_kebab_case() {
        let json = serde_json::to_string(&ModuleTarget::SelfAttn).unwrap();
        assert_eq!(json, "\"self-attn\"");
        let back: ModuleTarget = serde_json::from_str("\"feed-forward\"").unwrap();
        assert_eq!(back, ModuleTarget::FeedForward);
    }

    #[test]
    fn validate_request_enforces_mask_rules() {
        let info = ModelInfo {
            model_id: "m".into(),
            kind: ModelKind::Inpainting,
            downsample_factor: 4,
            differentiable: true,
            tap_capable: true,
        };
        let img = RgbImage::constant(16, 16, 0.5).unwrap();
        let req = EditRequest::new(img.clone(), "p");
        assert_eq!(
            validate_request(&info, &req),
            Err(AdapterError::MaskRequired)
        );

        let var_info = ModelInfo {
            kind: ModelKind::Variation,
            ..info.clone()
        };
        let mask = KeepMask::from_fn(16, 16, |y, _| y < 8).unwrap();
        let req = EditRequest::new(img, "p").with_mask(mask);
        assert_eq!(
            validate_request(&var_info, &req),
            Err(AdapterError::MaskForbidden)
        );
    }

    #[test]
    fn validate_request_enforces_divisibility() {
        let info = ModelInfo {
            model_id: "m".into(),
            kind: ModelKind::Variation,
            downsample_factor: 4,
            differentiable: true,
            tap_capable: true,
        };
        let img = RgbImage::constant(18, 16, 0.5).unwrap();
        let req = EditRequest::new(img, "p");
        assert!(matches!(
            validate_request(&info, &req),
            Err(AdapterError::DimensionMismatch { h: 18, .. })
        ));
        let img = RgbImage::constant(4, 16, 0.5).unwrap();
        let req = EditRequest::new(img, "p");
        assert!(matches!(
            validate_request(&info, &req),
            Err(AdapterError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn validate_request_enforces_parameter_ranges() {
        let info = ModelInfo {
            model_id: "m".into(),
            kind: ModelKind::Variation,
            downsample_factor: 4,
            differentiable: true,
            tap_capable: true,
        };
        let img = RgbImage::constant(16, 16, 0.5).unwrap();
        let base = EditRequest::new(img, "p");
        assert!(validate_request(&info, &base).is_ok());
        assert!(validate_request(&info, &base.clone().with_strength(0.0)).is_err());
        assert!(validate_request(&info, &base.clone().with_strength(1.2)).is_err());
        assert!(validate_request(&info, &base.clone().with_guidance(0.0)).is_err());
        assert!(validate_request(&info, &base.clone().with_steps(0)).is_err());
        assert!(validate_request(&info, &base.clone().with_steps(1)).is_ok());
    }
}
