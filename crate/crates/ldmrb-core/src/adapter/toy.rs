//! A self-contained, fully deterministic latent-diffusion image editor.
//!
//! The toy editor reproduces the *structure* of a latent-diffusion pipeline —
//! conv encoder, quantization projection, a weight-tied denoiser whose step
//! repeats residual-conv / self-attention / cross-attention / feed-forward
//! blocks, a projection back out of the latent space, and a conv decoder —
//! at desk scale, with every stage differentiable through the crate's
//! internal tape. It exists so attacks, defenses, metrics, and harness
//! protocols can be exercised end-to-end without GPU-scale weights.
//!
//! Design properties relied on by the rest of the toolkit:
//!
//! * **Determinism.** Weights come from the build seed; the latent noise
//!   comes from the request seed; the prompt embedding comes from a hash of
//!   the prompt text. Two editors built from the same seed are identical.
//! * **Taps.** Each named module's output (after its residual addition, for
//!   denoiser blocks) can be snapshotted; denoiser blocks yield one tap per
//!   step, the four non-loop modules one tap at step 0.
//! * **Gradients.** The feature-distortion loss against reference taps is
//!   differentiated with respect to the input pixels only; weights, noise,
//!   and prompt embeddings are constants.
//! * **Smoothness.** Activations are SiLU and the output nonlinearity is a
//!   sigmoid, so finite-difference gradient checks converge.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    validate_request, AdapterError, DiffusionModel, EditOutput, EditRequest, ModelInfo, ModelKind,
    ModuleTarget, TapRecord,
};
use crate::image::{PixelGradient, RgbImage};
use crate::rng::{derive_seed, fnv1a, seeded_rng};
use crate::tape::{BufId, ConvDims, Tape};

/// Pixel-to-latent downsampling of the toy editor (two stride-2 convs).
pub const TOY_DOWNSAMPLE: usize = 4;
/// Number of prompt-embedding tokens.
const PROMPT_TOKENS: usize = 4;
/// Standard deviation of the initial latent noise.
const NOISE_SIGMA: f64 = 0.5;
/// Cross-attention output gain per unit of guidance scale.
const GUIDANCE_GAIN: f64 = 0.1;
/// Hard cap on latent tokens; keeps the dense self-attention affordable.
const MAX_TOKENS: usize = 1024;

/// One convolution layer's parameters.
#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Vec<f64>,
    bias: Vec<f64>,
    in_c: usize,
    out_c: usize,
}

/// One dense projection's parameters (applied per latent position).
#[derive(Debug, Clone)]
struct DenseLayer {
    weight: Vec<f64>,
    bias: Vec<f64>,
    in_f: usize,
    out_f: usize,
}

#[derive(Debug, Clone)]
struct ToyWeights {
    enc1: ConvLayer,
    enc2: ConvLayer,
    quant: DenseLayer,
    res1: ConvLayer,
    res2: ConvLayer,
    sa_q: DenseLayer,
    sa_k: DenseLayer,
    sa_v: DenseLayer,
    sa_o: DenseLayer,
    ca_q: DenseLayer,
    ca_k: DenseLayer,
    ca_v: DenseLayer,
    ca_o: DenseLayer,
    ff1: DenseLayer,
    ff2: DenseLayer,
    post: DenseLayer,
    dec1: ConvLayer,
    dec2: ConvLayer,
}

/// The toy editor. Build with [`build_toy_model`] or
/// [`build_toy_inpainting_model`].
#[derive(Debug, Clone)]
pub struct ToyDiffusionModel {
    info: ModelInfo,
    weights: ToyWeights,
    latent_channels: usize,
    default_steps: usize,
}

fn uniform_init(rng: &mut impl Rng, count: usize, fan_in: usize) -> Vec<f64> {
    let bound = (3.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn conv_layer(rng: &mut impl Rng, in_c: usize, out_c: usize) -> ConvLayer {
    ConvLayer {
        weight: uniform_init(rng, out_c * in_c * 9, in_c * 9),
        bias: uniform_init(rng, out_c, in_c * 9),
        in_c,
        out_c,
    }
}

fn dense_layer(rng: &mut impl Rng, in_f: usize, out_f: usize) -> DenseLayer {
    DenseLayer {
        weight: uniform_init(rng, in_f * out_f, in_f),
        bias: uniform_init(rng, out_f, in_f),
        in_f,
        out_f,
    }
}

/// Builds a variation-mode toy editor.
///
/// `seed` fixes all weights, `latent_channels >= 2` sets the latent width,
/// and `steps >= 1` is the default number of denoising iterations used when
/// a request does not specify its own count.
pub fn build_toy_model(
    seed: u64,
    latent_channels: usize,
    steps: usize,
) -> Result<ToyDiffusionModel, AdapterError> {
    ToyDiffusionModel::build(seed, latent_channels, steps, ModelKind::Variation)
}

/// Builds an inpainting-mode toy editor; see [`build_toy_model`].
pub fn build_toy_inpainting_model(
    seed: u64,
    latent_channels: usize,
    steps: usize,
) -> Result<ToyDiffusionModel, AdapterError> {
    ToyDiffusionModel::build(seed, latent_channels, steps, ModelKind::Inpainting)
}

impl ToyDiffusionModel {
    fn build(
        seed: u64,
        latent_channels: usize,
        steps: usize,
        kind: ModelKind,
    ) -> Result<Self, AdapterError> {
        if latent_channels < 2 {
            return Err(AdapterError::InvalidRequest(format!(
                "latent_channels must be at least 2, got {latent_channels}"
            )));
        }
        if steps == 0 {
            return Err(AdapterError::InvalidRequest(
                "steps must be at least 1".into(),
            ));
        }
        let c = latent_channels;
        let hidden = 2 * c;
        let ff_dim = 4 * c;
        let mut rng = seeded_rng(derive_seed(seed, "toy-weights"));
        let weights = ToyWeights {
            enc1: conv_layer(&mut rng, 3, hidden),
            enc2: conv_layer(&mut rng, hidden, c),
            quant: dense_layer(&mut rng, c, c),
            res1: conv_layer(&mut rng, c, c),
            res2: conv_layer(&mut rng, c, c),
            sa_q: dense_layer(&mut rng, c, c),
            sa_k: dense_layer(&mut rng, c, c),
            sa_v: dense_layer(&mut rng, c, c),
            sa_o: dense_layer(&mut rng, c, c),
            ca_q: dense_layer(&mut rng, c, c),
            ca_k: dense_layer(&mut rng, c, c),
            ca_v: dense_layer(&mut rng, c, c),
            ca_o: dense_layer(&mut rng, c, c),
            ff1: dense_layer(&mut rng, c, ff_dim),
            ff2: dense_layer(&mut rng, ff_dim, c),
            post: dense_layer(&mut rng, c, c),
            dec1: conv_layer(&mut rng, c, hidden),
            dec2: conv_layer(&mut rng, hidden, 3),
        };
        let kind_tag = match kind {
            ModelKind::Variation => "var",
            ModelKind::Inpainting => "inp",
        };
        Ok(Self {
            info: ModelInfo {
                model_id: format!("toy-{kind_tag}-s{seed}-c{c}"),
                kind,
                downsample_factor: TOY_DOWNSAMPLE,
                differentiable: true,
                tap_capable: true,
            },
            weights,
            latent_channels,
            default_steps: steps,
        })
    }

    /// Default denoising step count fixed at build time.
    #[must_use]
    pub fn default_steps(&self) -> usize {
        self.default_steps
    }

    fn effective_steps(&self, request: &EditRequest) -> usize {
        request.diffusion_steps.unwrap_or(self.default_steps)
    }

    /// Deterministic prompt embedding: `PROMPT_TOKENS x latent_channels`
    /// values seeded purely from the prompt text.
    fn prompt_embedding(&self, prompt: &str) -> Vec<f64> {
        let mut rng = seeded_rng(derive_seed(fnv1a(prompt.as_bytes()), "prompt-embedding"));
        let normal = Normal::new(0.0, 0.7).expect("valid normal");
        (0..PROMPT_TOKENS * self.latent_channels)
            .map(|_| normal.sample(&mut rng))
            .collect()
    }

    /// Per-channel time conditioning added to the first residual conv's bias.
    fn time_bias(&self, step: usize) -> Vec<f64> {
        (0..self.latent_channels)
            .map(|ch| 0.05 * Float::sin(0.9 * (step as f64 + 1.0) + 1.7 * ch as f64))
            .collect()
    }

    /// Runs the whole pipeline on a fresh tape, returning the tape together
    /// with the input buffer, output buffer, and every tap's buffer id.
    fn trace(&self, request: &EditRequest) -> Result<ForwardTrace, AdapterError> {
        validate_request(&self.info, request)?;
        let c = self.latent_channels;
        let hidden = 2 * c;
        let ff_dim = 4 * c;
        let (ih, iw) = (request.image.height(), request.image.width());
        let (lh, lw) = (ih / TOY_DOWNSAMPLE, iw / TOY_DOWNSAMPLE);
        let tokens = lh * lw;
        if tokens > MAX_TOKENS {
            return Err(AdapterError::InvalidRequest(format!(
                "latent grid {lh}x{lw} exceeds the toy editor's {MAX_TOKENS}-token budget"
            )));
        }
        let steps = self.effective_steps(request);
        let scale_attn = 1.0 / (c as f64).sqrt();

        let mut tape = Tape::new();
        let input = tape.input(request.image.to_planar());
        let mut taps: Vec<(ModuleTarget, usize, BufId)> = Vec::new();

        // --- Encoder: two stride-2 convs, SiLU between. ---
        let w = &self.weights;
        let enc1_w = tape.constant(w.enc1.weight.clone());
        let enc1_b = tape.constant(w.enc1.bias.clone());
        let dims1 = ConvDims {
            in_c: w.enc1.in_c,
            out_c: w.enc1.out_c,
            in_h: ih,
            in_w: iw,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let e1 = tape.conv2d(input, enc1_w, dims1);
        let e1 = tape.bias_add(e1, enc1_b, dims1.out_h() * dims1.out_w());
        let e1 = tape.silu(e1);
        let enc2_w = tape.constant(w.enc2.weight.clone());
        let enc2_b = tape.constant(w.enc2.bias.clone());
        let dims2 = ConvDims {
            in_c: w.enc2.in_c,
            out_c: w.enc2.out_c,
            in_h: dims1.out_h(),
            in_w: dims1.out_w(),
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let e2 = tape.conv2d(e1, enc2_w, dims2);
        let e2 = tape.bias_add(e2, enc2_b, tokens);
        taps.push((ModuleTarget::Encoder, 0, e2));

        // --- Quantization projection, applied per latent position. ---
        let tok = tape.transpose(e2, c, tokens); // [tokens, c]
        let quant_w = tape.constant(w.quant.weight.clone());
        let q = tape.matmul(tok, quant_w, tokens, c, c);
        let q = tape.affine_const(q, vec![1.0; tokens * c], tile_rows(&w.quant.bias, tokens));
        taps.push((ModuleTarget::Quant, 0, q));

        // --- Latent initialization: strength-weighted mix with seeded noise.
        // For inpainting, kept positions stay at the encoded latent. ---
        let strength = request.strength;
        let mut noise_rng = seeded_rng(derive_seed(request.seed, "latent-noise"));
        let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid normal");
        let noise: Vec<f64> = (0..tokens * c).map(|_| normal.sample(&mut noise_rng)).collect();
        let (mix_scale, mix_offset) = match (&self.info.kind, &request.mask) {
            (ModelKind::Inpainting, Some(mask)) => {
                let latent_mask = mask
                    .resize_nearest(lh, lw)
                    .map_err(AdapterError::Image)?;
                let mut scale = vec![0.0; tokens * c];
                let mut offset = vec![0.0; tokens * c];
                for t in 0..tokens {
                    let kept = f64::from(latent_mask.data()[t]);
                    for ch in 0..c {
                        let i = t * c + ch;
                        scale[i] = kept + (1.0 - kept) * (1.0 - strength);
                        offset[i] = (1.0 - kept) * strength * noise[i];
                    }
                }
                (scale, offset)
            }
            _ => {
                let scale = vec![1.0 - strength; tokens * c];
                let offset: Vec<f64> = noise.iter().map(|n| strength * n).collect();
                (scale, offset)
            }
        };
        let mut z = tape.affine_const(q, mix_scale, mix_offset); // [tokens, c]

        // --- Prompt conditioning: fixed keys/values per prompt. ---
        let emb = self.prompt_embedding(&request.prompt);
        let ca_keys = dense_forward(&emb, &w.ca_k, PROMPT_TOKENS);
        let ca_values = dense_forward(&emb, &w.ca_v, PROMPT_TOKENS);
        let ca_keys = tape.constant(ca_keys);
        let ca_values = tape.constant(ca_values);

        // --- Weight-tied denoising loop. ---
        let res1_w = tape.constant(w.res1.weight.clone());
        let res2_w = tape.constant(w.res2.weight.clone());
        let res2_b = tape.constant(w.res2.bias.clone());
        let sa_qw = tape.constant(w.sa_q.weight.clone());
        let sa_kw = tape.constant(w.sa_k.weight.clone());
        let sa_vw = tape.constant(w.sa_v.weight.clone());
        let sa_ow = tape.constant(w.sa_o.weight.clone());
        let ca_qw = tape.constant(w.ca_q.weight.clone());
        let ca_ow = tape.constant(w.ca_o.weight.clone());
        let ff1_w = tape.constant(w.ff1.weight.clone());
        let ff2_w = tape.constant(w.ff2.weight.clone());
        let res_dims = ConvDims {
            in_c: w.res1.in_c,
            out_c: w.res1.out_c,
            in_h: lh,
            in_w: lw,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let uniform = vec![1.0; tokens * c];
        let double = vec![2.0; tokens * c];
        let minus_one = vec![-1.0; tokens * c];
        for step in 0..steps {
            // Residual conv block (time conditioning folds into the bias).
            let z_planar = tape.transpose(z, tokens, c); // [c, tokens]
            let tb: Vec<f64> = w
                .res1
                .bias
                .iter()
                .zip(self.time_bias(step))
                .map(|(b, t)| b + t)
                .collect();
            let res1_b = tape.constant(tb);
            let r = tape.conv2d(z_planar, res1_w, res_dims);
            let r = tape.bias_add(r, res1_b, tokens);
            let r = tape.silu(r);
            let r = tape.conv2d(r, res2_w, res_dims);
            let r = tape.bias_add(r, res2_b, tokens);
            let z_planar = tape.add(z_planar, r);
            taps.push((ModuleTarget::Resnet, step, z_planar));
            z = tape.transpose(z_planar, c, tokens); // [tokens, c]

            // Self-attention block.
            let qm = tape.matmul(z, sa_qw, tokens, c, c);
            let km = tape.matmul(z, sa_kw, tokens, c, c);
            let vm = tape.matmul(z, sa_vw, tokens, c, c);
            let scores = tape.matmul_bt(qm, km, tokens, c, tokens);
            let scores = tape.affine_const(
                scores,
                vec![scale_attn; tokens * tokens],
                vec![0.0; tokens * tokens],
            );
            let probs = tape.softmax_rows(scores, tokens, tokens);
            let mixed = tape.matmul(probs, vm, tokens, tokens, c);
            let out = tape.matmul(mixed, sa_ow, tokens, c, c);
            z = tape.add(z, out);
            taps.push((ModuleTarget::SelfAttn, step, z));

            // Cross-attention block; guidance scales the residual branch.
            let qc = tape.matmul(z, ca_qw, tokens, c, c);
            let scores = tape.matmul_bt(qc, ca_keys, tokens, c, PROMPT_TOKENS);
            let scores = tape.affine_const(
                scores,
                vec![scale_attn; tokens * PROMPT_TOKENS],
                vec![0.0; tokens * PROMPT_TOKENS],
            );
            let probs = tape.softmax_rows(scores, tokens, PROMPT_TOKENS);
            let mixed = tape.matmul(probs, ca_values, tokens, PROMPT_TOKENS, c);
            let out = tape.matmul(mixed, ca_ow, tokens, c, c);
            z = tape.add_scaled(z, out, request.guidance * GUIDANCE_GAIN);
            taps.push((ModuleTarget::CrossAttn, step, z));

            // Feed-forward block.
            let f = tape.matmul(z, ff1_w, tokens, c, ff_dim);
            let f = tape.affine_const(
                f,
                vec![1.0; tokens * ff_dim],
                tile_rows(&w.ff1.bias, tokens),
            );
            let f = tape.silu(f);
            let f = tape.matmul(f, ff2_w, tokens, ff_dim, c);
            let f = tape.affine_const(f, uniform.clone(), tile_rows(&w.ff2.bias, tokens));
            z = tape.add(z, f);
            taps.push((ModuleTarget::FeedForward, step, z));

            // Squash the running latent back into (-1, 1) before the next
            // step. The three residual branches above otherwise compound
            // geometrically with the step count, and a latent that grows
            // without bound saturates the decoder's output stage, flattening
            // the very gradients the smooth nonlinearities are meant to keep
            // alive.
            let squashed = tape.sigmoid_op(z);
            z = tape.affine_const(squashed, double.clone(), minus_one.clone());
        }

        // --- Projection out of the latent space. ---
        let post_w = tape.constant(w.post.weight.clone());
        let p = tape.matmul(z, post_w, tokens, c, c);
        let p = tape.affine_const(p, uniform, tile_rows(&w.post.bias, tokens));
        taps.push((ModuleTarget::PostQuant, 0, p));

        // --- Decoder: two upsample+conv stages ending in a sigmoid. ---
        let p_planar = tape.transpose(p, tokens, c); // [c, lh, lw]
        let up1 = tape.upsample2(p_planar, c, lh, lw);
        let dec1_w = tape.constant(w.dec1.weight.clone());
        let dec1_b = tape.constant(w.dec1.bias.clone());
        let dec_dims1 = ConvDims {
            in_c: w.dec1.in_c,
            out_c: w.dec1.out_c,
            in_h: 2 * lh,
            in_w: 2 * lw,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let d1 = tape.conv2d(up1, dec1_w, dec_dims1);
        let d1 = tape.bias_add(d1, dec1_b, 4 * tokens);
        let d1 = tape.silu(d1);
        let up2 = tape.upsample2(d1, hidden, 2 * lh, 2 * lw);
        let dec2_w = tape.constant(w.dec2.weight.clone());
        let dec2_b = tape.constant(w.dec2.bias.clone());
        let dec_dims2 = ConvDims {
            in_c: w.dec2.in_c,
            out_c: w.dec2.out_c,
            in_h: ih,
            in_w: iw,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let d2 = tape.conv2d(up2, dec2_w, dec_dims2);
        let d2 = tape.bias_add(d2, dec2_b, ih * iw);
        let decoded = tape.sigmoid_op(d2);
        taps.push((ModuleTarget::Decoder, 0, decoded));

        // --- Inpainting composes kept pixels back over the decoded image. ---
        let output = match (&self.info.kind, &request.mask) {
            (ModelKind::Inpainting, Some(mask)) => {
                let n = 3 * ih * iw;
                let mut keep = vec![0.0; n];
                let mut edit = vec![0.0; n];
                for ch in 0..3 {
                    for y in 0..ih {
                        for x in 0..iw {
                            let m = f64::from(mask.get(y, x));
                            let i = (ch * ih + y) * iw + x;
                            keep[i] = m;
                            edit[i] = 1.0 - m;
                        }
                    }
                }
                let kept = tape.affine_const(input, keep, vec![0.0; n]);
                let edited = tape.affine_const(decoded, edit, vec![0.0; n]);
                tape.add(kept, edited)
            }
            _ => decoded,
        };

        Ok(ForwardTrace {
            tape,
            input,
            output,
            taps,
            height: ih,
            width: iw,
        })
    }
}

struct ForwardTrace {
    tape: Tape,
    input: BufId,
    output: BufId,
    taps: Vec<(ModuleTarget, usize, BufId)>,
    height: usize,
    width: usize,
}

/// Repeats a bias vector once per row of a `[rows, len]` matrix.
fn tile_rows(bias: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bias.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

/// Plain (non-tape) dense projection of `[rows, in_f]` row-major data.
fn dense_forward(x: &[f64], layer: &DenseLayer, rows: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * layer.in_f);
    let mut out = vec![0.0; rows * layer.out_f];
    for r in 0..rows {
        for o in 0..layer.out_f {
            let mut acc = layer.bias[o];
            for i in 0..layer.in_f {
                acc += x[r * layer.in_f + i] * layer.weight[i * layer.out_f + o];
            }
            out[r * layer.out_f + o] = acc;
        }
    }
    out
}

impl DiffusionModel for ToyDiffusionModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn run_edit(
        &mut self,
        request: &EditRequest,
        taps: &[ModuleTarget],
    ) -> Result<EditOutput, AdapterError> {
        let mut wanted: Vec<ModuleTarget> = taps.iter().map(|t| t.resolve()).collect();
        wanted.sort_unstable();
        wanted.dedup();
        let trace = self.trace(request)?;
        let image =
            RgbImage::from_planar_clamped(trace.height, trace.width, trace.tape.value(trace.output));
        let mut records = Vec::new();
        for &(target, step_index, buf) in &trace.taps {
            if wanted.contains(&target) {
                records.push(TapRecord {
                    target,
                    step_index,
                    values: trace.tape.value(buf).to_vec(),
                });
            }
        }
        Ok(EditOutput {
            image,
            taps: records,
        })
    }

    fn loss_and_gradient(
        &mut self,
        request: &EditRequest,
        target: ModuleTarget,
        reference: &[TapRecord],
    ) -> Result<(f64, PixelGradient), AdapterError> {
        let resolved = target.resolve();
        let mut trace = self.trace(request)?;
        let current: Vec<(usize, BufId)> = trace
            .taps
            .iter()
            .filter(|(t, _, _)| *t == resolved)
            .map(|&(_, step, buf)| (step, buf))
            .collect();
        if reference.len() != current.len() {
            return Err(AdapterError::ShapeMismatch(format!(
                "{} reference taps for {} current activations of '{resolved}'",
                reference.len(),
                current.len()
            )));
        }
        let mut distances = Vec::with_capacity(current.len());
        for (step, buf) in current {
            let matching = reference
                .iter()
                .find(|r| r.target.resolve() == resolved && r.step_index == step)
                .ok_or_else(|| {
                    AdapterError::ShapeMismatch(format!(
                        "no reference tap for '{resolved}' at step {step}"
                    ))
                })?;
            if matching.values.len() != trace.tape.value(buf).len() {
                return Err(AdapterError::ShapeMismatch(format!(
                    "reference tap for '{resolved}' step {step} holds {} values, expected {}",
                    matching.values.len(),
                    trace.tape.value(buf).len()
                )));
            }
            distances.push(trace.tape.l2_dist(buf, matching.values.clone()));
        }
        let loss_buf = trace.tape.sum_scalars(distances);
        let loss = trace.tape.value(loss_buf)[0];
        trace.tape.backward(loss_buf);
        let mut grad = PixelGradient::zeros(trace.height, trace.width);
        if let Some(g) = trace.tape.grad(trace.input) {
            // The tape works on planar CHW; gradients come back interleaved.
            let hw = trace.height * trace.width;
            for px in 0..hw {
                for ch in 0..3 {
                    grad.data[px * 3 + ch] = g[ch * hw + px];
                }
            }
        }
        Ok((loss, grad))
    }
}

/// Returns the tap step indices the toy editor produces for `target` under
/// `steps` denoising iterations (denoiser blocks tap every step, boundary
/// modules tap once).
#[must_use]
pub fn expected_tap_steps(target: ModuleTarget, steps: usize) -> Vec<usize> {
    if target.is_denoiser_block() {
        (0..steps).collect()
    } else {
        vec![0]
    }
}
