//! A minimal Wengert-tape reverse-mode autodiff engine over flat `f64`
//! buffers.
//!
//! The tape exists to differentiate the toy diffusion editor's
//! feature-distortion loss with respect to its *input pixels* only; model
//! weights are recorded as constant buffers and never accumulate gradients.
//! Each helper method computes its forward result eagerly, stores it in a new
//! buffer, and records an op; [`Tape::backward`] replays the ops in reverse,
//! accumulating adjoints.

use alloc::vec;
#[allow(unused_imports)] // f64 math comes from the trait in no_std builds
use num_traits::Float;
use alloc::vec::Vec;

/// Handle to a buffer on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BufId(usize);

/// Convolution geometry for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
enum Op {
    /// Planar conv: input `[in_c, in_h, in_w]`, weight `[out_c, in_c, k, k]`.
    /// Backward only reaches the input; weights are constants.
    Conv2d {
        input: BufId,
        weight: BufId,
        out: BufId,
        dims: ConvDims,
    },
    /// Adds `bias[c]` to every spatial position of channel `c`. The bias is
    /// always a constant buffer, so backward is a pass-through to the input.
    BiasAddChan { input: BufId, out: BufId },
    /// `out = x * sigmoid(x)` elementwise.
    Silu { input: BufId, out: BufId },
    /// `out = sigmoid(x)` elementwise.
    Sigmoid { input: BufId, out: BufId },
    /// `out = a + factor * b` elementwise.
    AddScaled { a: BufId, b: BufId, factor: f64, out: BufId },
    /// `out[i] = scale[i] * x[i] + offset[i]` with constant scale/offset;
    /// only the scale matters for backward.
    AffineConst {
        input: BufId,
        scale: Vec<f64>,
        out: BufId,
    },
    /// Row-major matmul: `a (m x k) * b (k x n)`.
    MatMul {
        a: BufId,
        b: BufId,
        out: BufId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Row-major matmul against a transposed right operand:
    /// `a (m x k) * b^T` with `b (n x k)`.
    MatMulBT {
        a: BufId,
        b: BufId,
        out: BufId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Row-wise softmax of an `rows x cols` matrix.
    SoftmaxRows {
        input: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// Transpose of an `rows x cols` row-major matrix.
    Transpose {
        input: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// Nearest-neighbour 2x upsample of a planar `[c, h, w]` buffer.
    Upsample2 {
        input: BufId,
        out: BufId,
        channels: usize,
        h: usize,
        w: usize,
    },
    /// Euclidean distance between a buffer and a constant reference vector.
    L2Dist {
        input: BufId,
        reference: Vec<f64>,
        out: BufId,
    },
    /// Sum of scalar buffers.
    SumScalars { inputs: Vec<BufId>, out: BufId },
}

struct Buf {
    data: Vec<f64>,
    constant: bool,
}

/// The tape itself: buffers plus the op log.
pub(crate) struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, data: Vec<f64>, constant: bool) -> BufId {
        self.bufs.push(Buf { data, constant });
        self.grads.push(None);
        BufId(self.bufs.len() - 1)
    }

    /// Registers a differentiable input buffer.
    pub fn input(&mut self, data: Vec<f64>) -> BufId {
        self.push(data, false)
    }

    /// Registers a constant (non-differentiated) buffer.
    pub fn constant(&mut self, data: Vec<f64>) -> BufId {
        self.push(data, true)
    }

    /// Current forward value of a buffer.
    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id.0].data
    }

    /// Gradient accumulated for a buffer by [`Tape::backward`], if any.
    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn conv2d(&mut self, input: BufId, weight: BufId, dims: ConvDims) -> BufId {
        debug_assert_eq!(self.bufs[input.0].data.len(), dims.in_c * dims.in_h * dims.in_w);
        debug_assert_eq!(
            self.bufs[weight.0].data.len(),
            dims.out_c * dims.in_c * dims.kernel * dims.kernel
        );
        let (oh, ow) = (dims.out_h(), dims.out_w());
        let mut out = vec![0.0; dims.out_c * oh * ow];
        {
            let x = &self.bufs[input.0].data;
            let w = &self.bufs[weight.0].data;
            for oc in 0..dims.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..dims.in_c {
                            for ky in 0..dims.kernel {
                                let iy = (oy * dims.stride + ky) as isize - dims.pad as isize;
                                if iy < 0 || iy >= dims.in_h as isize {
                                    continue;
                                }
                                for kx in 0..dims.kernel {
                                    let ix = (ox * dims.stride + kx) as isize - dims.pad as isize;
                                    if ix < 0 || ix >= dims.in_w as isize {
                                        continue;
                                    }
                                    let xi = (ic * dims.in_h + iy as usize) * dims.in_w
                                        + ix as usize;
                                    let wi = ((oc * dims.in_c + ic) * dims.kernel + ky)
                                        * dims.kernel
                                        + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::Conv2d {
            input,
            weight,
            out,
            dims,
        });
        out
    }

    pub fn bias_add(&mut self, input: BufId, bias: BufId, spatial: usize) -> BufId {
        let channels = self.bufs[bias.0].data.len();
        debug_assert_eq!(self.bufs[input.0].data.len(), channels * spatial);
        let mut out = self.bufs[input.0].data.clone();
        for c in 0..channels {
            let b = self.bufs[bias.0].data[c];
            for s in 0..spatial {
                out[c * spatial + s] += b;
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::BiasAddChan { input, out });
        out
    }

    pub fn silu(&mut self, input: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[input.0]
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let out = self.push(out, false);
        self.ops.push(Op::Silu { input, out });
        out
    }

    pub fn sigmoid_op(&mut self, input: BufId) -> BufId {
        let out: Vec<f64> = self.bufs[input.0].data.iter().map(|&x| sigmoid(x)).collect();
        let out = self.push(out, false);
        self.ops.push(Op::Sigmoid { input, out });
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        self.add_scaled(a, b, 1.0)
    }

    pub fn add_scaled(&mut self, a: BufId, b: BufId, factor: f64) -> BufId {
        debug_assert_eq!(self.bufs[a.0].data.len(), self.bufs[b.0].data.len());
        let out: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x + factor * y)
            .collect();
        let out = self.push(out, false);
        self.ops.push(Op::AddScaled { a, b, factor, out });
        out
    }

    pub fn affine_const(&mut self, input: BufId, scale: Vec<f64>, offset: Vec<f64>) -> BufId {
        let n = self.bufs[input.0].data.len();
        debug_assert_eq!(scale.len(), n);
        debug_assert_eq!(offset.len(), n);
        let out: Vec<f64> = self.bufs[input.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| scale[i] * x + offset[i])
            .collect();
        let out = self.push(out, false);
        self.ops.push(Op::AffineConst { input, scale, out });
        out
    }

    pub fn matmul(&mut self, a: BufId, b: BufId, m: usize, k: usize, n: usize) -> BufId {
        debug_assert_eq!(self.bufs[a.0].data.len(), m * k);
        debug_assert_eq!(self.bufs[b.0].data.len(), k * n);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a.0].data;
            let bv = &self.bufs[b.0].data;
            for r in 0..m {
                for j in 0..k {
                    let x = av[r * k + j];
                    if x == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        out[r * n + c] += x * bv[j * n + c];
                    }
                }
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::MatMul { a, b, out, m, k, n });
        out
    }

    pub fn matmul_bt(&mut self, a: BufId, b: BufId, m: usize, k: usize, n: usize) -> BufId {
        debug_assert_eq!(self.bufs[a.0].data.len(), m * k);
        debug_assert_eq!(self.bufs[b.0].data.len(), n * k);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a.0].data;
            let bv = &self.bufs[b.0].data;
            for r in 0..m {
                for c in 0..n {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += av[r * k + j] * bv[c * k + j];
                    }
                    out[r * n + c] = acc;
                }
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::MatMulBT { a, b, out, m, k, n });
        out
    }

    pub fn softmax_rows(&mut self, input: BufId, rows: usize, cols: usize) -> BufId {
        debug_assert_eq!(self.bufs[input.0].data.len(), rows * cols);
        let mut out = vec![0.0; rows * cols];
        {
            let x = &self.bufs[input.0].data;
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    out[r * cols + c] /= sum;
                }
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::SoftmaxRows {
            input,
            out,
            rows,
            cols,
        });
        out
    }

    pub fn transpose(&mut self, input: BufId, rows: usize, cols: usize) -> BufId {
        debug_assert_eq!(self.bufs[input.0].data.len(), rows * cols);
        let mut out = vec![0.0; rows * cols];
        {
            let x = &self.bufs[input.0].data;
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::Transpose {
            input,
            out,
            rows,
            cols,
        });
        out
    }

    pub fn upsample2(&mut self, input: BufId, channels: usize, h: usize, w: usize) -> BufId {
        debug_assert_eq!(self.bufs[input.0].data.len(), channels * h * w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; channels * oh * ow];
        {
            let x = &self.bufs[input.0].data;
            for c in 0..channels {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[(c * h + y) * w + xx];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out[(c * oh + 2 * y + dy) * ow + 2 * xx + dx] = v;
                            }
                        }
                    }
                }
            }
        }
        let out = self.push(out, false);
        self.ops.push(Op::Upsample2 {
            input,
            out,
            channels,
            h,
            w,
        });
        out
    }

    pub fn l2_dist(&mut self, input: BufId, reference: Vec<f64>) -> BufId {
        debug_assert_eq!(self.bufs[input.0].data.len(), reference.len());
        let dist = self.bufs[input.0]
            .data
            .iter()
            .zip(&reference)
            .map(|(&x, &r)| (x - r) * (x - r))
            .sum::<f64>()
            .sqrt();
        let out = self.push(vec![dist], false);
        self.ops.push(Op::L2Dist {
            input,
            reference,
            out,
        });
        out
    }

    pub fn sum_scalars(&mut self, inputs: Vec<BufId>) -> BufId {
        let total: f64 = inputs.iter().map(|id| self.bufs[id.0].data[0]).sum();
        let out = self.push(vec![total], false);
        self.ops.push(Op::SumScalars { inputs, out });
        out
    }

    fn grad_mut(&mut self, id: BufId) -> &mut Vec<f64> {
        let len = self.bufs[id.0].data.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn take_out_grad(&mut self, id: BufId) -> Option<Vec<f64>> {
        self.grads[id.0].clone()
    }

    /// Runs reverse-mode accumulation from a scalar `loss` buffer. Gradients
    /// for constant buffers are skipped.
    pub fn backward(&mut self, loss: BufId) {
        debug_assert_eq!(self.bufs[loss.0].data.len(), 1);
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            // Ops are taken one at a time to appease the borrow checker; the
            // log itself is never mutated during the sweep.
            let op = &self.ops[idx];
            match op {
                Op::Conv2d {
                    input,
                    weight,
                    out,
                    dims,
                } => {
                    let (input, weight, out, dims) = (*input, *weight, *out, *dims);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let (oh, ow) = (dims.out_h(), dims.out_w());
                    let w = self.bufs[weight.0].data.clone();
                    let d_in = self.grad_mut(input);
                    for oc in 0..dims.out_c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = d_out[(oc * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ic in 0..dims.in_c {
                                    for ky in 0..dims.kernel {
                                        let iy =
                                            (oy * dims.stride + ky) as isize - dims.pad as isize;
                                        if iy < 0 || iy >= dims.in_h as isize {
                                            continue;
                                        }
                                        for kx in 0..dims.kernel {
                                            let ix = (ox * dims.stride + kx) as isize
                                                - dims.pad as isize;
                                            if ix < 0 || ix >= dims.in_w as isize {
                                                continue;
                                            }
                                            let xi = (ic * dims.in_h + iy as usize) * dims.in_w
                                                + ix as usize;
                                            let wi = ((oc * dims.in_c + ic) * dims.kernel + ky)
                                                * dims.kernel
                                                + kx;
                                            d_in[xi] += g * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BiasAddChan { input, out, .. } => {
                    let (input, out) = (*input, *out);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let d_in = self.grad_mut(input);
                    for (di, g) in d_in.iter_mut().zip(&d_out) {
                        *di += g;
                    }
                }
                Op::Silu { input, out } => {
                    let (input, out) = (*input, *out);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let x = self.bufs[input.0].data.clone();
                    let d_in = self.grad_mut(input);
                    for i in 0..x.len() {
                        let s = sigmoid(x[i]);
                        d_in[i] += d_out[i] * (s * (1.0 + x[i] * (1.0 - s)));
                    }
                }
                Op::Sigmoid { input, out } => {
                    let (input, out) = (*input, *out);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let y = self.bufs[out.0].data.clone();
                    let d_in = self.grad_mut(input);
                    for i in 0..y.len() {
                        d_in[i] += d_out[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::AddScaled { a, b, factor, out } => {
                    let (a, b, factor, out) = (*a, *b, *factor, *out);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if !self.bufs[a.0].constant {
                        let d_a = self.grad_mut(a);
                        for (da, g) in d_a.iter_mut().zip(&d_out) {
                            *da += g;
                        }
                    }
                    if !self.bufs[b.0].constant {
                        let d_b = self.grad_mut(b);
                        for (db, g) in d_b.iter_mut().zip(&d_out) {
                            *db += factor * g;
                        }
                    }
                }
                Op::AffineConst {
                    input, scale, out, ..
                } => {
                    let input = *input;
                    let out = *out;
                    let scale = scale.clone();
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let d_in = self.grad_mut(input);
                    for i in 0..scale.len() {
                        d_in[i] += scale[i] * d_out[i];
                    }
                }
                Op::MatMul { a, b, out, m, k, n } => {
                    let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if !self.bufs[a.0].constant {
                        let bv = self.bufs[b.0].data.clone();
                        let d_a = self.grad_mut(a);
                        // dA = dOut * B^T
                        for r in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += d_out[r * n + c] * bv[j * n + c];
                                }
                                d_a[r * k + j] += acc;
                            }
                        }
                    }
                    if !self.bufs[b.0].constant {
                        let av = self.bufs[a.0].data.clone();
                        let d_b = self.grad_mut(b);
                        // dB = A^T * dOut
                        for j in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += av[r * k + j] * d_out[r * n + c];
                                }
                                d_b[j * n + c] += acc;
                            }
                        }
                    }
                }
                Op::MatMulBT { a, b, out, m, k, n } => {
                    let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if !self.bufs[a.0].constant {
                        let bv = self.bufs[b.0].data.clone();
                        let d_a = self.grad_mut(a);
                        // dA = dOut * B (because out = A * B^T)
                        for r in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += d_out[r * n + c] * bv[c * k + j];
                                }
                                d_a[r * k + j] += acc;
                            }
                        }
                    }
                    if !self.bufs[b.0].constant {
                        let av = self.bufs[a.0].data.clone();
                        let d_b = self.grad_mut(b);
                        // dB = dOut^T * A
                        for c in 0..n {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += d_out[r * n + c] * av[r * k + j];
                                }
                                d_b[c * k + j] += acc;
                            }
                        }
                    }
                }
                Op::SoftmaxRows {
                    input,
                    out,
                    rows,
                    cols,
                } => {
                    let (input, out, rows, cols) = (*input, *out, *rows, *cols);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let y = self.bufs[out.0].data.clone();
                    let d_in = self.grad_mut(input);
                    for r in 0..rows {
                        let row = &y[r * cols..(r + 1) * cols];
                        let dg = &d_out[r * cols..(r + 1) * cols];
                        let dot: f64 = row.iter().zip(dg).map(|(&p, &g)| p * g).sum();
                        for c in 0..cols {
                            d_in[r * cols + c] += row[c] * (dg[c] - dot);
                        }
                    }
                }
                Op::Transpose {
                    input,
                    out,
                    rows,
                    cols,
                } => {
                    let (input, out, rows, cols) = (*input, *out, *rows, *cols);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let d_in = self.grad_mut(input);
                    for r in 0..rows {
                        for c in 0..cols {
                            d_in[r * cols + c] += d_out[c * rows + r];
                        }
                    }
                }
                Op::Upsample2 {
                    input,
                    out,
                    channels,
                    h,
                    w,
                } => {
                    let (input, out, channels, h, w) = (*input, *out, *channels, *h, *w);
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let (oh, ow) = (2 * h, 2 * w);
                    let d_in = self.grad_mut(input);
                    for c in 0..channels {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut acc = 0.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        acc += d_out[(c * oh + 2 * y + dy) * ow + 2 * xx + dx];
                                    }
                                }
                                d_in[(c * h + y) * w + xx] += acc;
                            }
                        }
                    }
                }
                Op::L2Dist {
                    input,
                    reference,
                    out,
                } => {
                    let input = *input;
                    let out = *out;
                    let reference = reference.clone();
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    if self.bufs[input.0].constant {
                        continue;
                    }
                    let dist = self.bufs[out.0].data[0];
                    if dist <= 1e-30 {
                        // The distance is not differentiable at zero; use a
                        // zero subgradient.
                        continue;
                    }
                    let x = self.bufs[input.0].data.clone();
                    let d_in = self.grad_mut(input);
                    let g = d_out[0] / dist;
                    for i in 0..x.len() {
                        d_in[i] += g * (x[i] - reference[i]);
                    }
                }
                Op::SumScalars { inputs, out } => {
                    let inputs = inputs.clone();
                    let out = *out;
                    let Some(d_out) = self.take_out_grad(out) else { continue };
                    for id in inputs {
                        if !self.bufs[id.0].constant {
                            self.grad_mut(id)[0] += d_out[0];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of a scalar-valued tape program.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / scale < tol,
                "component {i}: {x} vs {y}"
            );
        }
    }

    /// A program exercising every op: conv, bias, silu, matmuls, softmax,
    /// transpose, upsample, affine, residuals, and the l2 loss head.
    fn full_program(x: &[f64]) -> (Tape, BufId, BufId) {
        let mut tape = Tape::new();
        let input = tape.input(x.to_vec());
        let dims = ConvDims {
            in_c: 1,
            out_c: 2,
            in_h: 4,
            in_w: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let w: Vec<f64> = (0..18).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.11).collect();
        let w = tape.constant(w);
        let b = tape.constant(alloc::vec![0.05, -0.1]);
        let c1 = tape.conv2d(input, w, dims);
        let c1 = tape.bias_add(c1, b, 4);
        let h1 = tape.silu(c1);
        // Treat the planar [2, 2, 2] buffer as a 4x2 matrix of tokens.
        let tokens = tape.transpose(h1, 2, 4);
        let wq = tape.constant(alloc::vec![0.3, -0.2, 0.15, 0.4]);
        let q = tape.matmul(tokens, wq, 4, 2, 2);
        let scores = tape.matmul_bt(q, tokens, 4, 2, 4);
        let probs = tape.softmax_rows(scores, 4, 4);
        let mixed = tape.matmul(probs, tokens, 4, 4, 2);
        let res = tape.add_scaled(tokens, mixed, 0.7);
        let planar = tape.transpose(res, 4, 2);
        let up = tape.upsample2(planar, 2, 2, 2);
        let n = 2 * 4 * 4;
        let scale: Vec<f64> = (0..n).map(|i| 0.5 + 0.01 * i as f64).collect();
        let offset: Vec<f64> = (0..n).map(|i| -0.2 + 0.005 * i as f64).collect();
        let aff = tape.affine_const(up, scale, offset);
        let sig = tape.sigmoid_op(aff);
        let reference: Vec<f64> = (0..n).map(|i| 0.4 + 0.01 * ((i * 3) % 7) as f64).collect();
        let d1 = tape.l2_dist(sig, reference);
        let refb: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let d2 = tape.l2_dist(res, refb);
        let loss = tape.sum_scalars(alloc::vec![d1, d2]);
        (tape, input, loss)
    }

    #[test]
    fn full_program_gradient_matches_central_differences() {
        let x: Vec<f64> = (0..16).map(|i| 0.1 + 0.05 * ((i * 5) % 11) as f64).collect();
        let (mut tape, input, loss) = full_program(&x);
        tape.backward(loss);
        let analytic = tape.grad(input).expect("input gradient").to_vec();

        let f = |v: &[f64]| {
            let (tape, _, loss) = full_program(v);
            tape.value(loss)[0]
        };
        let numeric = numeric_grad(f, &x, 1e-5);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn constants_accumulate_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(alloc::vec![0.3, 0.7]);
        let c = tape.constant(alloc::vec![1.0, 2.0]);
        let s = tape.add(x, c);
        let loss = tape.l2_dist(s, alloc::vec![0.0, 0.0]);
        tape.backward(loss);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn l2_dist_at_zero_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.input(alloc::vec![0.25, 0.5]);
        let loss = tape.l2_dist(x, alloc::vec![0.25, 0.5]);
        tape.backward(loss);
        let g = tape.grad(x);
        assert!(g.is_none() || g.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut tape = Tape::new();
        let x = tape.input(alloc::vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let p = tape.softmax_rows(x, 2, 3);
        for r in 0..2 {
            let sum: f64 = tape.value(p)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x1 input channel, 2x2 image, 3x3 kernel, stride 1, pad 1.
        let mut tape = Tape::new();
        let x = tape.input(alloc::vec![1.0, 2.0, 3.0, 4.0]);
        #[rustfmt::skip]
        let w = tape.constant(alloc::vec![
            0.0, 0.0, 0.0,
            0.0, 1.0, 0.5,
            0.0, 0.25, 0.0,
        ]);
        let dims = ConvDims {
            in_c: 1,
            out_c: 1,
            in_h: 2,
            in_w: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let y = tape.conv2d(x, w, dims);
        // out[0,0] = 1*1 + 0.5*2 + 0.25*3 = 2.75
        // out[0,1] = 1*2 + 0.5*0 + 0.25*4 = 3.0
        // out[1,0] = 1*3 + 0.5*4 = 5.0 ; out[1,1] = 1*4 = 4.0
        assert_eq!(tape.value(y), &[2.75, 3.0, 5.0, 4.0]);
    }

    #[test]
    fn upsample2_replicates_and_backward_sums() {
        let mut tape = Tape::new();
        let x = tape.input(alloc::vec![1.0, 2.0, 3.0, 4.0]);
        let up = tape.upsample2(x, 1, 2, 2);
        assert_eq!(
            tape.value(up),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let loss = tape.l2_dist(up, alloc::vec![0.0; 16]);
        tape.backward(loss);
        let g = tape.grad(x).unwrap();
        // d||up(x)||/dx_i = 4 * x_i / ||up(x)||.
        let norm = tape.value(loss)[0];
        for (i, &xi) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((g[i] - 4.0 * xi / norm).abs() < 1e-12);
        }
    }
}
