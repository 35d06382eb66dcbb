//! Float kernels: causal 2-D convolutions over (frequency, time), kernel-1
//! convolutions, dense layers and pointwise activations.
//!
//! Layout conventions: activations are `[channels, freq, time]` (or
//! `[channels, freq]` for a single frame), conv weights are
//! `[out, in, k_f, k_t]`, transposed-conv weights are `[in, out, k_f, k_t]`.
//! Along time the last kernel tap multiplies the current frame.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k_f, k_t)
    pub kernel: (usize, usize),
    /// (s_f, s_t)
    pub stride: (usize, usize),
    pub transposed: bool,
}

impl ConvSpec {
    pub fn causal_3x3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: (1, 1),
            transposed: false,
        }
    }

    pub fn transposed_3x3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            transposed: true,
            ..Self::causal_3x3(in_channels, out_channels)
        }
    }

    pub fn kernel1(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: (1, 1),
            transposed: false,
        }
    }

    /// Symmetric zero padding applied on each side of the frequency axis.
    pub fn freq_padding(&self) -> usize {
        self.kernel.0 / 2
    }

    /// Past frames a causal conv must remember.
    pub fn history_frames(&self) -> usize {
        self.kernel.1 - 1
    }

    pub fn output_bins(&self, bins: usize) -> usize {
        let pad = self.freq_padding();
        if self.transposed {
            (bins - 1) * self.stride.0 + self.kernel.0 - 2 * pad
        } else {
            (bins + 2 * pad - self.kernel.0) / self.stride.0 + 1
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let (kf, kt) = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kf, kt]
        } else {
            [self.out_channels, self.in_channels, kf, kt]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kf, kt) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || kf == 0 || kt == 0 {
            return Err(Error::config(format!("degenerate conv spec {self:?}")));
        }
        if self.stride.1 != 1 {
            return Err(Error::config("streaming convs need time stride 1"));
        }
        if self.stride.0 == 0 {
            return Err(Error::config("frequency stride must be positive"));
        }
        if kf == 1 && kt == 1 && self.stride != (1, 1) {
            return Err(Error::config("kernel-1 convs take stride 1"));
        }
        if self.transposed && self.stride.0 != 1 {
            return Err(Error::config("transposed 2-D convs support frequency stride 1 only"));
        }
        Ok(())
    }
}

fn check_conv_inputs(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
    history: &Tensor,
) -> Result<(usize, usize)> {
    spec.validate()?;
    if spec.kernel.1 < 2 {
        return Err(Error::config(
            "causal 2-D conv needs a temporal kernel of at least 2; use conv1d_k1",
        ));
    }
    if input.ndim() != 3 || input.dim(0) != spec.in_channels {
        return Err(Error::config(format!(
            "conv input: expected [{}, F, T], got {:?}",
            spec.in_channels,
            input.shape()
        )));
    }
    let (bins, frames) = (input.dim(1), input.dim(2));
    weights.expect_shape(&spec.weight_shape(), "conv weights")?;
    bias.expect_shape(&[spec.out_channels], "conv bias")?;
    history.expect_shape(
        &[spec.in_channels, bins, spec.history_frames()],
        "conv history",
    )?;
    input.ensure_finite("conv input")?;
    Ok((bins, frames))
}

/// `[C, F, H]` history followed by `[C, F, T]` input, concatenated on time.
fn extend_with_history(input: &Tensor, history: &Tensor) -> (Vec<f32>, usize) {
    let (c, f, t) = (input.dim(0), input.dim(1), input.dim(2));
    let h = history.dim(2);
    let te = h + t;
    let mut ext = vec![0.0; c * f * te];
    for ci in 0..c {
        for fi in 0..f {
            let dst = &mut ext[(ci * f + fi) * te..(ci * f + fi + 1) * te];
            let hrow = (ci * f + fi) * h;
            dst[..h].copy_from_slice(&history.data()[hrow..hrow + h]);
            let irow = (ci * f + fi) * t;
            dst[h..].copy_from_slice(&input.data()[irow..irow + t]);
        }
    }
    (ext, te)
}

fn tail_history(ext: &[f32], c: usize, f: usize, te: usize, h: usize) -> Tensor {
    let mut hist = Vec::with_capacity(c * f * h);
    for row in 0..c * f {
        hist.extend_from_slice(&ext[row * te + te - h..(row + 1) * te]);
    }
    Tensor::new(&[c, f, h], hist).expect("history shape")
}

/// Causal 2-D convolution over `[C_in, F, T]` frames.
///
/// `history` holds the `k_t - 1` frames preceding `input` (zeros at stream
/// start). Returns the `[C_out, F', T]` output and the updated history.
pub fn conv2d_causal(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
    history: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if spec.transposed {
        return Err(Error::config("conv2d_causal called with a transposed spec"));
    }
    let (bins, frames) = check_conv_inputs(input, spec, weights, bias, history)?;
    let (kf, kt) = spec.kernel;
    let pad = spec.freq_padding() as isize;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let out_bins = spec.output_bins(bins);
    let (ext, te) = extend_with_history(input, history);
    let w = weights.data();
    let mut out = vec![0.0; cout * out_bins * frames];
    for co in 0..cout {
        for fo in 0..out_bins {
            for t in 0..frames {
                let mut acc = bias.data()[co];
                for ci in 0..cin {
                    for j in 0..kf {
                        let fi = (fo * spec.stride.0) as isize + j as isize - pad;
                        if fi < 0 || fi >= bins as isize {
                            continue;
                        }
                        let row = (ci * bins + fi as usize) * te + t;
                        let wrow = ((co * cin + ci) * kf + j) * kt;
                        for k in 0..kt {
                            acc += w[wrow + k] * ext[row + k];
                        }
                    }
                }
                out[(co * out_bins + fo) * frames + t] = acc;
            }
        }
    }
    let hist = tail_history(&ext, cin, bins, te, spec.history_frames());
    Ok((Tensor::new(&[cout, out_bins, frames], out)?, hist))
}

/// Causal 2-D transposed convolution (stride 1), trimmed so that output
/// frame `t` depends on input frames `t-k_t+1..=t` only.
pub fn conv_transpose2d_causal(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
    history: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if !spec.transposed {
        return Err(Error::config(
            "conv_transpose2d_causal called with a regular spec",
        ));
    }
    let (bins, frames) = check_conv_inputs(input, spec, weights, bias, history)?;
    let (kf, kt) = spec.kernel;
    let pad = spec.freq_padding() as isize;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let h = spec.history_frames();
    let (ext, te) = extend_with_history(input, history);
    let w = weights.data();
    let mut out = vec![0.0; cout * bins * frames];
    for co in 0..cout {
        for fo in 0..bins {
            for t in 0..frames {
                let mut acc = bias.data()[co];
                for ci in 0..cin {
                    for j in 0..kf {
                        let fi = fo as isize + pad - j as isize;
                        if fi < 0 || fi >= bins as isize {
                            continue;
                        }
                        let row = (ci * bins + fi as usize) * te + t + h;
                        let wrow = ((ci * cout + co) * kf + j) * kt;
                        for k in 0..kt {
                            acc += w[wrow + k] * ext[row - k];
                        }
                    }
                }
                out[(co * bins + fo) * frames + t] = acc;
            }
        }
    }
    let hist = tail_history(&ext, cin, bins, te, h);
    Ok((Tensor::new(&[cout, bins, frames], out)?, hist))
}

/// Unfolds the newest output frame of a causal conv into columns:
/// `window` is `[C_in, F, k_t]` (oldest frame first) and the result is
/// `[C_in*k_f*k_t, F']` with rows ordered `(c_in, j, k)`, matching a
/// `[C_out, C_in, k_f, k_t]` weight flattened to a matrix.
pub fn conv2d_columns(window: &Tensor, spec: &ConvSpec) -> Tensor {
    let (c, bins, kt) = (window.dim(0), window.dim(1), window.dim(2));
    let kf = spec.kernel.0;
    let pad = spec.freq_padding() as isize;
    let out_bins = spec.output_bins(bins);
    let mut cols = vec![0.0; c * kf * kt * out_bins];
    for ci in 0..c {
        for j in 0..kf {
            for k in 0..kt {
                let r = (ci * kf + j) * kt + k;
                for fo in 0..out_bins {
                    let fi = (fo * spec.stride.0) as isize + j as isize - pad;
                    if fi >= 0 && fi < bins as isize {
                        cols[r * out_bins + fo] = window.data()[(ci * bins + fi as usize) * kt + k];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * kf * kt, out_bins], cols).expect("column shape")
}

/// Column unfolding for the transposed conv; pair with
/// [`transposed_weight_matrix`].
pub fn conv_transpose2d_columns(window: &Tensor, spec: &ConvSpec) -> Tensor {
    let (c, bins, kt) = (window.dim(0), window.dim(1), window.dim(2));
    let kf = spec.kernel.0;
    let pad = spec.freq_padding() as isize;
    let mut cols = vec![0.0; c * kf * kt * bins];
    for ci in 0..c {
        for j in 0..kf {
            for k in 0..kt {
                let r = (ci * kf + j) * kt + k;
                for fo in 0..bins {
                    let fi = fo as isize + pad - j as isize;
                    if fi >= 0 && fi < bins as isize {
                        cols[r * bins + fo] =
                            window.data()[(ci * bins + fi as usize) * kt + (kt - 1 - k)];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * kf * kt, bins], cols).expect("column shape")
}

/// `[C_in, C_out, k_f, k_t]` weights rearranged into a `[C_out, C_in*k_f*k_t]` matrix.
pub fn transposed_weight_matrix(weights: &Tensor) -> Tensor {
    let (cin, cout, kf, kt) = (weights.dim(0), weights.dim(1), weights.dim(2), weights.dim(3));
    let taps = kf * kt;
    let mut m = vec![0.0; cout * cin * taps];
    for ci in 0..cin {
        for co in 0..cout {
            let src = &weights.data()[(ci * cout + co) * taps..(ci * cout + co + 1) * taps];
            m[(co * cin + ci) * taps..(co * cin + ci + 1) * taps].copy_from_slice(src);
        }
    }
    Tensor::new(&[cout, cin * taps], m).expect("weight matrix shape")
}

const ROWS: usize = 4;
const LANES: usize = 8;

/// `ROWS x LANES` outputs accumulated in registers over `k`; `x` holds lane
/// blocks `stride` apart.
#[inline(always)]
fn micro_kernel<T: Accum>(w: [&[T]; ROWS], x: &[T], stride: usize, acc: [[T; LANES]; ROWS]) -> [[T; LANES]; ROWS] {
    let inner = w[0].len();
    let (w0, w1, w2, w3) = (w[0], &w[1][..inner], &w[2][..inner], &w[3][..inner]);
    let [mut a0, mut a1, mut a2, mut a3] = acc;
    for k in 0..inner {
        let xs: [T; LANES] = x[k * stride..][..LANES].try_into().expect("lane block");
        let (p0, p1, p2, p3) = (w0[k], w1[k], w2[k], w3[k]);
        for l in 0..LANES {
            a0[l] += p0 * xs[l];
            a1[l] += p1 * xs[l];
            a2[l] += p2 * xs[l];
            a3[l] += p3 * xs[l];
        }
    }
    [a0, a1, a2, a3]
}

/// Element types of [`affine_columns`]: f32, and the exact integer
/// accumulators.
pub(crate) trait Accum: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> {}

impl Accum for f32 {}
impl Accum for i32 {}
impl Accum for i64 {}

/// `out[m, :] = bias[m] + sum_k w[m, k] * x[k, :]`, accumulated in ascending `k`.
///
/// Outputs are computed in register blocks; leftover columns go through a
/// zero-padded copy of `x`. Every output sees the same sequence of additions
/// as a plain loop, so the result does not depend on the blocking.
pub(crate) fn affine_columns<T: Accum>(
    w: &[T],
    bias: Option<&[T]>,
    x: &[T],
    rows: usize,
    inner: usize,
    cols: usize,
) -> Vec<T> {
    debug_assert_eq!(w.len(), rows * inner);
    debug_assert_eq!(x.len(), inner * cols);
    let mut out = vec![T::default(); rows * cols];
    if let Some(b) = bias {
        for (orow, &bm) in out.chunks_exact_mut(cols).zip(b) {
            orow.fill(bm);
        }
    }
    if inner == 0 {
        return out;
    }
    let full_rows = rows - rows % ROWS;
    let full_cols = cols - cols % LANES;
    let tail = cols - full_cols;
    let mut padded = vec![T::default(); if tail > 0 { inner * LANES } else { 0 }];
    for k in 0..inner.min(padded.len() / LANES) {
        padded[k * LANES..k * LANES + tail].copy_from_slice(&x[k * cols + full_cols..(k + 1) * cols]);
    }
    for m in (0..full_rows).step_by(ROWS) {
        let wr: [&[T]; ROWS] = std::array::from_fn(|r| &w[(m + r) * inner..(m + r + 1) * inner]);
        let mut run = |j: usize, width: usize, xb: &[T], stride: usize| {
            let acc = std::array::from_fn(|r| {
                let mut a = [T::default(); LANES];
                a[..width].copy_from_slice(&out[(m + r) * cols + j..][..width]);
                a
            });
            for (r, a) in micro_kernel(wr, xb, stride, acc).iter().enumerate() {
                out[(m + r) * cols + j..][..width].copy_from_slice(&a[..width]);
            }
        };
        for j in (0..full_cols).step_by(LANES) {
            run(j, LANES, &x[j..], cols);
        }
        if tail > 0 {
            run(full_cols, tail, &padded, LANES);
        }
    }
    for m in full_rows..rows {
        let orow = &mut out[m * cols..(m + 1) * cols];
        for (k, &wk) in w[m * inner..(m + 1) * inner].iter().enumerate() {
            for (o, &xv) in orow.iter_mut().zip(&x[k * cols..(k + 1) * cols]) {
                *o += wk * xv;
            }
        }
    }
    out
}

/// Kernel-1 1-D convolution: the same affine map applied to every column of
/// a `[C_in, N]` input.
pub fn conv1d_k1(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.ndim() != 2 || weights.ndim() != 2 {
        return Err(Error::config("conv1d_k1 takes [C_in, N] input and [C_out, C_in] weights"));
    }
    let (cin, n) = (input.dim(0), input.dim(1));
    let cout = weights.dim(0);
    if weights.dim(1) != cin {
        return Err(Error::config(format!(
            "conv1d_k1: weights expect {} input channels, input has {cin}",
            weights.dim(1)
        )));
    }
    bias.expect_shape(&[cout], "conv1d_k1 bias")?;
    let out = affine_columns(weights.data(), Some(bias.data()), input.data(), cout, cin, n);
    Tensor::new(&[cout, n], out)
}

/// Affine map over the trailing dimension, broadcast over leading dims.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weights.ndim() != 2 {
        return Err(Error::config("linear weights must be [M, N]"));
    }
    let (m, n) = (weights.dim(0), weights.dim(1));
    let last = *input.shape().last().expect("non-empty shape");
    if last != n {
        return Err(Error::config(format!(
            "linear: trailing dim {last} does not match weight width {n}"
        )));
    }
    bias.expect_shape(&[m], "linear bias")?;
    let rows = input.len() / n;
    let mut out = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let x = &input.data()[r * n..(r + 1) * n];
        for o in 0..m {
            let w = &weights.data()[o * n..(o + 1) * n];
            let mut acc = bias.data()[o];
            for (a, b) in w.iter().zip(x) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::new(&shape, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[inline]
pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// Logistic sigmoid, evaluated in f64 and rounded once.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

/// Hyperbolic tangent through one f64 `exp`, rounded once. Several times
/// cheaper than `f32::tanh` and no less accurate; the cubic branch avoids
/// cancellation near zero, the clamp overflow.
#[inline]
pub fn tanh(x: f32) -> f32 {
    let x = f64::from(x);
    let t = if x.abs() < 1e-4 {
        x * (1.0 - x * x / 3.0)
    } else if x.abs() > 20.0 {
        x.signum()
    } else {
        1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
    };
    t as f32
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(relu),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(tanh),
    }
}
