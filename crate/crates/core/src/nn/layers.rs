//! Layer descriptions and the per-sample kernels behind them.
//!
//! Activations are NCHW. Convolutions use zero "same" padding so spatial
//! dims are preserved. 3×3 convolutions are computed directly, row by row:
//! with few channels that beats im2col plus GEMM, whose packing copies
//! dominate at these sizes.

use serde::{Deserialize, Serialize};

use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    /// Concatenates the previous output with the activation stored at node
    /// `skip_from` (node 0 is the network input, node `i + 1` the output of
    /// layer `i`). Channel order is `[previous, skip]`.
    ConcatSkip {
        skip_from: usize,
    },
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Only meaningful for [`LayerKind::Dropout`].
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        Self::new(LayerKind::Conv3x3, in_channels, out_channels)
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        Self::new(LayerKind::Conv1x1, in_channels, out_channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::new(LayerKind::Relu, channels, channels)
    }

    pub fn sigmoid(channels: usize) -> Self {
        Self::new(LayerKind::Sigmoid, channels, channels)
    }

    pub fn max_pool2(channels: usize) -> Self {
        Self::new(LayerKind::MaxPool2, channels, channels)
    }

    pub fn upsample2(channels: usize) -> Self {
        Self::new(LayerKind::Upsample2, channels, channels)
    }

    pub fn concat_skip(in_channels: usize, skip_channels: usize, skip_from: usize) -> Self {
        Self::new(
            LayerKind::ConcatSkip { skip_from },
            in_channels,
            in_channels + skip_channels,
        )
    }

    pub fn dropout(channels: usize, rate: f64) -> Self {
        Self {
            dropout_rate: rate,
            ..Self::new(LayerKind::Dropout, channels, channels)
        }
    }

    fn new(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            dropout_rate: 0.0,
        }
    }

    pub fn kernel_size(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv3x3 => Some(3),
            LayerKind::Conv1x1 => Some(1),
            _ => None,
        }
    }

    /// (weight count, bias count) for parameterized layers.
    pub fn param_shape(&self) -> Option<(Vec<usize>, usize)> {
        self.kernel_size().map(|k| {
            (
                vec![self.out_channels, self.in_channels, k, k],
                self.out_channels,
            )
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_shape()
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .unwrap_or(0)
    }
}

/// Copies each `h×w` channel into a zero-bordered `(h+2)×(w+2)` plane.
fn pad_planes<T: Real>(input: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let w2 = w + 2;
    let pp = (h + 2) * w2;
    let mut out = vec![T::zero(); channels * pp];
    for c in 0..channels {
        for y in 0..h {
            let src = &input[(c * h + y) * w..][..w];
            out[c * pp + (y + 1) * w2 + 1..][..w].copy_from_slice(src);
        }
    }
    out
}

// The 3×3 kernels below work on "wide" rows of stride w+2: output pixel
// (y, x) lives at y·(w+2) + x and tap (ky, kx) reads the padded input at
// that index plus ky·(w+2) + kx, so every tap is one long contiguous
// multiply-add. Columns w and w+1 of a wide row are scratch.
//
// On x86-64 the same code is also compiled with AVX2 enabled and picked at
// run time. Multiplies and adds are never fused and every element sees the
// same operation order, so both paths give bitwise-identical results.

#[inline(always)]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums, so it vectorizes.
#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += x * y;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

#[inline(always)]
fn tap_offset(t: usize, w2: usize) -> usize {
    (t / 3) * w2 + t % 3
}

macro_rules! dispatch_avx2 {
    ($generic:ident, $avx2:ident, ($($arg:ident),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                return unsafe { $avx2($($arg),*) };
            }
        }
        $generic($($arg),*)
    }};
}

/// One sample of a same-padded 3×3 convolution. `weights` is `[co][ci][3][3]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_forward<T: Real>(
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    co: usize,
    out: &mut [T],
) {
    dispatch_avx2!(
        forward_generic,
        forward_avx2,
        (input, ci, h, w, weights, bias, co, out)
    )
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_avx2<T: Real>(
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    co: usize,
    out: &mut [T],
) {
    forward_generic(input, ci, h, w, weights, bias, co, out)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_generic<T: Real>(
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    co: usize,
    out: &mut [T],
) {
    let w2 = w + 2;
    let pp = (h + 2) * w2;
    // Last two wide entries would read past the padded plane; both are scratch.
    let len = h * w2 - 2;
    let padded = pad_planes(input, ci, h, w);
    let mut wide = vec![T::zero(); h * w2];
    for o in 0..co {
        wide.fill(bias[o]);
        for c in 0..ci {
            let src = &padded[c * pp..(c + 1) * pp];
            let k = &weights[(o * ci + c) * 9..][..9];
            for (t, &kv) in k.iter().enumerate() {
                let off = tap_offset(t, w2);
                axpy(kv, &src[off..off + len], &mut wide[..len]);
            }
        }
        for y in 0..h {
            out[(o * h + y) * w..][..w].copy_from_slice(&wide[y * w2..][..w]);
        }
    }
}

/// Gradients of [`conv3x3_forward`]: accumulates into `grad_w` and
/// overwrites `grad_in`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Real>(
    grad_out: &[T],
    co: usize,
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weights: &[T],
    grad_w: &mut [T],
    grad_in: &mut [T],
) {
    dispatch_avx2!(
        backward_generic,
        backward_avx2,
        (grad_out, co, input, ci, h, w, weights, grad_w, grad_in)
    )
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn backward_avx2<T: Real>(
    grad_out: &[T],
    co: usize,
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weights: &[T],
    grad_w: &mut [T],
    grad_in: &mut [T],
) {
    backward_generic(grad_out, co, input, ci, h, w, weights, grad_w, grad_in)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_generic<T: Real>(
    grad_out: &[T],
    co: usize,
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weights: &[T],
    grad_w: &mut [T],
    grad_in: &mut [T],
) {
    let w2 = w + 2;
    let pp = (h + 2) * w2;
    let len = h * w2 - 2;
    let padded = pad_planes(input, ci, h, w);
    // Upstream gradient in wide rows; scratch columns stay zero so they
    // contribute nothing.
    let mut g = vec![T::zero(); co * h * w2];
    for o in 0..co {
        for y in 0..h {
            g[(o * h + y) * w2..][..w].copy_from_slice(&grad_out[(o * h + y) * w..][..w]);
        }
    }
    let mut dpad = vec![T::zero(); pp];
    for c in 0..ci {
        dpad.fill(T::zero());
        let src = &padded[c * pp..(c + 1) * pp];
        for o in 0..co {
            let go = &g[o * h * w2..][..len];
            let k = &weights[(o * ci + c) * 9..][..9];
            let gk = &mut grad_w[(o * ci + c) * 9..][..9];
            for t in 0..9 {
                let off = tap_offset(t, w2);
                gk[t] += dot(go, &src[off..off + len]);
                axpy(k[t], go, &mut dpad[off..off + len]);
            }
        }
        for y in 0..h {
            grad_in[(c * h + y) * w..][..w].copy_from_slice(&dpad[(y + 1) * w2 + 1..][..w]);
        }
    }
}

pub(crate) fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

pub(crate) fn accumulate_bias_grad<T: Real>(grad_out: &[T], grad_bias: &mut [T], plane: usize) {
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &g in &grad_out[co * plane..(co + 1) * plane] {
            acc += g;
        }
        *gb += acc;
    }
}

/// 2×2 max pooling with stride 2. Returns the flat source index of every
/// selected maximum (first maximum wins on ties).
pub(crate) fn max_pool2<T: Real>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let base = c * h * w + 2 * y * w + 2 * x;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = c * oh * ow + y * ow + x;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub(crate) fn upsample2<T: Real>(input: &[T], channels: usize, h: usize, w: usize, out: &mut [T]) {
    let ow = 2 * w;
    for c in 0..channels {
        for y in 0..2 * h {
            let src = &input[c * h * w + (y / 2) * w..][..w];
            let dst = &mut out[c * 4 * h * w + y * ow..][..ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
}

/// Adjoint of [`upsample2`]: sums each 2×2 block of `grad` (shape at 2h×2w).
pub(crate) fn upsample2_backward<T: Real>(
    grad: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let gw = 2 * w;
    for c in 0..channels {
        let g = &grad[c * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * gw + 2 * x;
                out[c * h * w + y * w + x] = g[i] + g[i + 1] + g[i + gw] + g[i + gw + 1];
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
