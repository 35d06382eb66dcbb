//! Integer and bf16 kernels. Integer affine maps accumulate exactly (i32 for
//! 8-bit activations, i64 for 16-bit) and requantize with one f64 multiply
//! followed by round-half-to-even.

use super::QuantParams;
use crate::error::{Error, Result};
use crate::model::graph::LstmState;
use crate::tensor::ops::affine_columns;
use crate::tensor::{bf16_round, bf16_round_slice, sigmoid, tanh, Tensor};

/// Bias in accumulator units: `round(b / (s_in * s_w[m]))`.
pub fn quantize_bias(bias: &[f32], input_scale: f32, weight_scales: &[f32]) -> Vec<i64> {
    bias.iter()
        .enumerate()
        .map(|(m, &b)| {
            let sw = weight_scales[if weight_scales.len() == 1 { 0 } else { m }];
            (f64::from(b) / (f64::from(input_scale) * f64::from(sw))).round_ties_even() as i64
        })
        .collect()
}

fn row_scale(scales: &[f32], m: usize) -> f64 {
    f64::from(scales[if scales.len() == 1 { 0 } else { m }])
}

/// `acc * s_in * s_w[m]` as f32, for `[rows, cols]` accumulators.
pub fn dequantize_accumulators(acc: &[i64], rows: usize, cols: usize, input_scale: f32, weight_scales: &[f32]) -> Tensor {
    let mut out = Vec::with_capacity(rows * cols);
    for (m, row) in acc.chunks_exact(cols).enumerate() {
        let sw = row_scale(weight_scales, m);
        out.extend(row.iter().map(|&a| (a as f64 * f64::from(input_scale) * sw) as f32));
    }
    Tensor::new(&[rows, cols], out).expect("accumulator shape")
}

/// `s_in * s_w[m] / s_out` for every output row.
fn row_multipliers(input: &QuantParams, weight_scales: &[f32], output: &QuantParams, rows: usize) -> Vec<f64> {
    let (s_in, s_out) = (f64::from(input.scale[0]), f64::from(output.scale[0]));
    (0..rows).map(|m| s_in * row_scale(weight_scales, m) / s_out).collect()
}

fn requantize(acc: f64, multiplier: f64, out: &QuantParams) -> i32 {
    let q = (acc * multiplier).round_ties_even() + f64::from(out.zero_point);
    q.clamp(f64::from(out.qmin()), f64::from(out.qmax())) as i32
}

/// Largest accumulator magnitude of an 8-bit kernel before the bias.
fn acc8_bound(inner: usize) -> i64 {
    inner as i64 * 255 * 127
}

fn accumulate_i32(w: &[i8], x: &[i16], bias: Option<&[i32]>, rows: usize, inner: usize, cols: usize) -> Vec<i32> {
    let w: Vec<i32> = w.iter().map(|&v| i32::from(v)).collect();
    let x: Vec<i32> = x.iter().map(|&v| i32::from(v)).collect();
    affine_columns(&w, bias, &x, rows, inner, cols)
}

fn accumulate_i64(w: &[i8], x: &[i32], bias: Option<&[i64]>, rows: usize, inner: usize, cols: usize) -> Vec<i64> {
    let w: Vec<i64> = w.iter().map(|&v| i64::from(v)).collect();
    let x: Vec<i64> = x.iter().map(|&v| i64::from(v)).collect();
    affine_columns(&w, bias, &x, rows, inner, cols)
}

fn check_layer(
    input_shape: &[usize],
    input_qp: &QuantParams,
    weights: &Tensor<i8>,
    weight_qp: &QuantParams,
    bias_len: usize,
    output_qp: &QuantParams,
    bits: u8,
) -> Result<(usize, usize, usize)> {
    input_qp.validate()?;
    weight_qp.validate()?;
    output_qp.validate()?;
    if input_shape.len() != 2 || weights.ndim() != 2 || weights.dim(1) != input_shape[0] {
        return Err(Error::config(format!(
            "integer conv: weights {:?} cannot take input {input_shape:?}",
            weights.shape()
        )));
    }
    let (m, k, n) = (weights.dim(0), weights.dim(1), input_shape[1]);
    if input_qp.bits != bits || output_qp.bits != bits || input_qp.channels() != 1 || output_qp.channels() != 1 {
        return Err(Error::config(format!("activations must be per-tensor {bits}-bit")));
    }
    if weight_qp.bits != 8 || !weight_qp.symmetric || ![1, m].contains(&weight_qp.channels()) {
        return Err(Error::config("weights must be symmetric 8-bit, per tensor or per output channel"));
    }
    if bias_len != m {
        return Err(Error::config(format!("bias has {bias_len} entries, layer has {m} outputs")));
    }
    Ok((m, k, n))
}

/// Kernel-1 convolution on int8 activations and int8 per-channel weights,
/// requantized to int8 at `output_qp`. `bias` is at scale `s_in * s_w`.
pub fn int8_conv1d_k1(
    input: &Tensor<i8>,
    input_qp: &QuantParams,
    weights: &Tensor<i8>,
    weight_qp: &QuantParams,
    bias: &[i32],
    output_qp: &QuantParams,
) -> Result<Tensor<i8>> {
    let (m, k, n) = check_layer(input.shape(), input_qp, weights, weight_qp, bias.len(), output_qp, 8)?;
    let bmax = bias.iter().map(|b| i64::from(*b).abs()).max().unwrap_or(0);
    assert!(acc8_bound(k) + bmax <= i64::from(i32::MAX), "int8 accumulator can overflow for {k} inputs");
    let zp = input_qp.zero_point;
    let x: Vec<i16> = input.data().iter().map(|&q| (i32::from(q) - zp) as i16).collect();
    let acc = accumulate_i32(weights.data(), &x, Some(bias), m, k, n);
    let mults = row_multipliers(input_qp, &weight_qp.scale, output_qp, m);
    let out = acc
        .chunks_exact(n)
        .zip(mults)
        .flat_map(|(row, mult)| row.iter().map(move |&a| requantize(f64::from(a), mult, output_qp) as i8))
        .collect();
    Tensor::new(&[m, n], out)
}

/// As [`int8_conv1d_k1`] with int16 activations and i64 accumulation.
pub fn int16_conv1d_k1(
    input: &Tensor<i16>,
    input_qp: &QuantParams,
    weights: &Tensor<i8>,
    weight_qp: &QuantParams,
    bias: &[i64],
    output_qp: &QuantParams,
) -> Result<Tensor<i16>> {
    let (m, k, n) = check_layer(input.shape(), input_qp, weights, weight_qp, bias.len(), output_qp, 16)?;
    let zp = input_qp.zero_point;
    let x: Vec<i32> = input.data().iter().map(|&q| i32::from(q) - zp).collect();
    let acc = accumulate_i64(weights.data(), &x, Some(bias), m, k, n);
    let mults = row_multipliers(input_qp, &weight_qp.scale, output_qp, m);
    let out = acc
        .chunks_exact(n)
        .zip(mults)
        .flat_map(|(row, mult)| row.iter().map(move |&a| requantize(a as f64, mult, output_qp) as i16))
        .collect();
    Tensor::new(&[m, n], out)
}

#[derive(Debug, Clone)]
enum IntBias {
    I32(Vec<i32>),
    I64(Vec<i64>),
}

/// An integer affine layer with float edges: quantizes its input, runs the
/// integer kernel and returns dequantized output. With an output
/// `QuantParams` the result is requantized first; without, the accumulators
/// are dequantized directly.
#[derive(Debug, Clone)]
pub struct IntAffine {
    rows: usize,
    inner: usize,
    weight: Vec<i8>,
    row_scale: Vec<f32>,
    bias: Option<IntBias>,
    input: QuantParams,
    output: Option<QuantParams>,
}

impl IntAffine {
    /// `weight` is `[M, K]` with one scale per row.
    pub fn new(
        weight: Tensor<i8>,
        row_scale: Vec<f32>,
        bias: Option<&Tensor>,
        input: QuantParams,
        output: Option<QuantParams>,
    ) -> Result<Self> {
        input.validate()?;
        if input.channels() != 1 {
            return Err(Error::config("activation parameters must be per tensor"));
        }
        if let Some(o) = &output {
            o.validate()?;
            if o.channels() != 1 || o.bits != input.bits {
                return Err(Error::config("output parameters must be per tensor at the input bit width"));
            }
        }
        if weight.ndim() != 2 || row_scale.len() != weight.dim(0) {
            return Err(Error::config("integer affine needs [M, K] weights and M row scales"));
        }
        let (rows, inner) = (weight.dim(0), weight.dim(1));
        let bias = match bias {
            None => None,
            Some(b) => {
                b.expect_shape(&[rows], "integer affine bias")?;
                let q = quantize_bias(b.data(), input.scale[0], &row_scale);
                if input.bits == 8 {
                    let bmax = q.iter().map(|v| v.abs()).max().unwrap_or(0);
                    if acc8_bound(inner) + bmax > i64::from(i32::MAX) {
                        return Err(Error::Numeric("int8 accumulator range exceeded by bias".into()));
                    }
                    Some(IntBias::I32(q.into_iter().map(|v| v as i32).collect()))
                } else {
                    Some(IntBias::I64(q))
                }
            }
        };
        if input.bits == 8 && acc8_bound(inner) > i64::from(i32::MAX) {
            return Err(Error::config(format!("{inner} inputs overflow an int8 accumulator")));
        }
        Ok(IntAffine { rows, inner, weight: weight.into_data(), row_scale, bias, input, output })
    }

    pub fn input_params(&self) -> &QuantParams {
        &self.input
    }

    pub fn output_params(&self) -> Option<&QuantParams> {
        self.output.as_ref()
    }

    /// `[K, N]` float in, `[M, N]` float out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.dim(0) != self.inner {
            return Err(Error::config(format!(
                "integer affine expects [{}, N] input, got {:?}",
                self.inner,
                x.shape()
            )));
        }
        x.ensure_finite("integer affine input")?;
        let n = x.dim(1);
        let zp = self.input.zero_point;
        // the per-tensor form of `QuantParams::quantize`, as a plain loop
        let (s, z) = (f64::from(self.input.scale[0]), f64::from(zp));
        let (lo, hi) = (f64::from(self.input.qmin()), f64::from(self.input.qmax()));
        let codes = x.data().iter().map(|&v| ((f64::from(v) / s).round_ties_even() + z).clamp(lo, hi) as i32 - zp);
        let acc: Vec<i64> = if self.input.bits == 16 {
            let xq: Vec<i32> = codes.collect();
            let bias = match &self.bias {
                Some(IntBias::I64(b)) => Some(b.as_slice()),
                _ => None,
            };
            accumulate_i64(&self.weight, &xq, bias, self.rows, self.inner, n)
        } else {
            let xq: Vec<i16> = codes.map(|q| q as i16).collect();
            let bias = match &self.bias {
                Some(IntBias::I32(b)) => Some(b.as_slice()),
                _ => None,
            };
            accumulate_i32(&self.weight, &xq, bias, self.rows, self.inner, n)
                .into_iter()
                .map(i64::from)
                .collect()
        };
        let s_in = self.input.scale[0];
        Ok(match &self.output {
            None => dequantize_accumulators(&acc, self.rows, n, s_in, &self.row_scale),
            Some(out) => {
                let mut y = Vec::with_capacity(acc.len());
                for (row, mult) in acc.chunks_exact(n).zip(row_multipliers(&self.input, &self.row_scale, out, self.rows)) {
                    y.extend(row.iter().map(|&a| out.dequantize(requantize(a as f64, mult, out), 0)));
                }
                Tensor::new(&[self.rows, n], y)?
            }
        })
    }
}

/// Affine map with bf16 inputs, weights and bias, f32 accumulation and a
/// bf16-rounded output.
pub fn bf16_affine(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let w = weight.map(bf16_round);
    let b = bias.map(|b| b.map(bf16_round));
    bf16_affine_rounded(&w, b.as_ref(), x)
}

/// [`bf16_affine`] for weights and bias already on the bf16 grid.
pub(crate) fn bf16_affine_rounded(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let (m, k) = (weight.dim(0), weight.dim(1));
    if x.ndim() != 2 || x.dim(0) != k {
        return Err(Error::config(format!("bf16 affine: weight [{m}, {k}] cannot take {:?}", x.shape())));
    }
    let n = x.dim(1);
    let mut xr = x.data().to_vec();
    bf16_round_slice(&mut xr);
    let mut out = affine_columns(weight.data(), bias.map(|b| b.data()), &xr, m, k, n);
    bf16_round_slice(&mut out);
    Tensor::new(&[m, n], out)
}

fn cell_shapes(gx: &Tensor, gh: &Tensor, state: &LstmState) -> Result<(usize, usize)> {
    let (hid, n) = (state.h.dim(0), state.h.dim(1));
    gx.expect_shape(&[4 * hid, n], "input gates")?;
    gh.expect_shape(&[4 * hid, n], "recurrent gates")?;
    Ok((hid, n))
}

/// LSTM gate math with every input, intermediate and state rounded to bf16.
pub(crate) fn bf16_cell(gx: &Tensor, gh: &Tensor, state: &mut LstmState) -> Result<()> {
    let (hid, n) = cell_shapes(gx, gh, state)?;
    let r = bf16_round;
    let pre = |g: usize, j: usize, f: usize| {
        let idx = (g * hid + j) * n + f;
        r(r(gx.data()[idx]) + r(gh.data()[idx]))
    };
    let mut h_new = vec![0.0; hid * n];
    let c = state.c.data_mut();
    for j in 0..hid {
        for f in 0..n {
            let i_g = r(sigmoid(pre(0, j, f)));
            let f_g = r(sigmoid(pre(1, j, f)));
            let g_g = r(tanh(pre(2, j, f)));
            let o_g = r(sigmoid(pre(3, j, f)));
            let idx = j * n + f;
            let c_new = r(r(f_g * r(c[idx])) + r(i_g * g_g));
            c[idx] = c_new;
            h_new[idx] = r(o_g * r(tanh(c_new)));
        }
    }
    state.h.data_mut().copy_from_slice(&h_new);
    Ok(())
}

/// Analytic 8-bit parameters for sigmoid outputs, `[0, 1]`.
pub(crate) fn sigmoid_params() -> QuantParams {
    QuantParams::asymmetric_from_range(0.0, 1.0, 8).expect("static range")
}

/// Analytic 8-bit parameters for tanh outputs and the hidden state, `[-1, 1]`.
pub(crate) fn tanh_params() -> QuantParams {
    QuantParams::asymmetric_from_range(-1.0, 1.0, 8).expect("static range")
}

/// LSTM gate math with every gate activation, the cell state and the hidden
/// state snapped to an 8-bit grid.
pub(crate) fn int8_cell(gx: &Tensor, gh: &Tensor, state: &mut LstmState, c_qp: &QuantParams) -> Result<()> {
    let (hid, n) = cell_shapes(gx, gh, state)?;
    let (sq, tq) = (sigmoid_params(), tanh_params());
    let fq = |qp: &QuantParams, v: f32| qp.dequantize(qp.quantize(v, 0), 0);
    let pre = |g: usize, j: usize, f: usize| {
        let idx = (g * hid + j) * n + f;
        gx.data()[idx] + gh.data()[idx]
    };
    let mut h_new = vec![0.0; hid * n];
    let c = state.c.data_mut();
    for j in 0..hid {
        for f in 0..n {
            let i_g = fq(&sq, sigmoid(pre(0, j, f)));
            let f_g = fq(&sq, sigmoid(pre(1, j, f)));
            let g_g = fq(&tq, tanh(pre(2, j, f)));
            let o_g = fq(&sq, sigmoid(pre(3, j, f)));
            let idx = j * n + f;
            let c_new = fq(c_qp, f_g * c[idx] + i_g * g_g);
            c[idx] = c_new;
            h_new[idx] = fq(&tq, o_g * fq(&tq, tanh(c_new)));
        }
    }
    state.h.data_mut().copy_from_slice(&h_new);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize_i16, dequantize_i8, fake_quant, quantize_i16, quantize_i8, weight_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Layer {
        x: Tensor,
        w: Tensor,
        b: Tensor,
    }

    fn random_layer(rng: &mut ChaCha8Rng) -> Layer {
        let (m, k, n) = (rng.gen_range(1..40), rng.gen_range(1..200), rng.gen_range(1..90));
        let lo = rng.gen_range(-4.0..0.0);
        let hi = rng.gen_range(0.1..4.0);
        let ws = rng.gen_range(0.01..1.0);
        Layer {
            x: Tensor::from_fn(&[k, n], |_| rng.gen_range(lo..hi)),
            w: Tensor::from_fn(&[m, k], |_| rng.gen_range(-ws..ws)),
            b: Tensor::from_fn(&[m], |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn act_params(t: &Tensor, bits: u8) -> QuantParams {
        let lo = t.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        QuantParams::asymmetric_from_range(lo, hi, bits).unwrap()
    }

    /// Float simulation: fake-quant input and weights, bias at `s_in * s_w`,
    /// exact sum, fake-quant output.
    fn simulate(l: &Tensor, xq: &QuantParams, wq: &QuantParams, b: &[i64], w: &Tensor) -> Tensor {
        let xf = fake_quant(l, xq).unwrap();
        let wf = fake_quant(w, wq).unwrap();
        let (m, k, n) = (w.dim(0), w.dim(1), l.dim(1));
        Tensor::from_fn(&[m, n], |i| {
            let (r, c) = (i / n, i % n);
            let mut acc = b[r] as f64 * f64::from(xq.scale[0]) * f64::from(wq.scale[r]);
            for kk in 0..k {
                acc += f64::from(wf.data()[r * k + kk]) * f64::from(xf.data()[kk * n + c]);
            }
            acc as f32
        })
    }

    #[test]
    fn int8_within_one_lsb_of_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..120 {
            let l = random_layer(&mut rng);
            let xq = act_params(&l.x, 8);
            let wq = weight_params(&l.w, 0).unwrap();
            let bias = quantize_bias(l.b.data(), xq.scale[0], &wq.scale);
            let sim = simulate(&l.x, &xq, &wq, &bias, &l.w);
            let oq = act_params(&sim, 8);
            let b32: Vec<i32> = bias.iter().map(|&v| v as i32).collect();
            let y = int8_conv1d_k1(
                &quantize_i8(&l.x, &xq, 0).unwrap(),
                &xq,
                &quantize_i8(&l.w, &wq, 0).unwrap(),
                &wq,
                &b32,
                &oq,
            )
            .unwrap();
            let want = quantize_i8(&sim, &oq, 0).unwrap();
            let lsb = y.data().iter().zip(want.data()).map(|(a, b)| (i32::from(*a) - i32::from(*b)).abs()).max();
            assert!(lsb.unwrap_or(0) <= 1);
        }
    }

    #[test]
    fn int16_within_one_lsb_of_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let l = random_layer(&mut rng);
            let xq = act_params(&l.x, 16);
            let wq = weight_params(&l.w, 0).unwrap();
            let bias = quantize_bias(l.b.data(), xq.scale[0], &wq.scale);
            let sim = simulate(&l.x, &xq, &wq, &bias, &l.w);
            let oq = act_params(&sim, 16);
            let y = int16_conv1d_k1(
                &quantize_i16(&l.x, &xq, 0).unwrap(),
                &xq,
                &quantize_i8(&l.w, &wq, 0).unwrap(),
                &wq,
                &bias,
                &oq,
            )
            .unwrap();
            let want = quantize_i16(&sim, &oq, 0).unwrap();
            let lsb = y.data().iter().zip(want.data()).map(|(a, b)| (i32::from(*a) - i32::from(*b)).abs()).max();
            assert!(lsb.unwrap_or(0) <= 1);
        }
    }

    #[test]
    fn zero_input_gives_output_zero_point() {
        let xq = QuantParams::per_tensor(0.05, -20, 8).unwrap();
        let oq = QuantParams::per_tensor(0.1, 7, 8).unwrap();
        let wq = QuantParams::symmetric(vec![0.01; 3], 8).unwrap();
        let x = Tensor::<i8>::new(&[4, 5], vec![-20; 20]).unwrap();
        let w = Tensor::<i8>::from_fn(&[3, 4], |i| (i as i8) * 9 - 50);
        let y = int8_conv1d_k1(&x, &xq, &w, &wq, &[0, 0, 0], &oq).unwrap();
        assert!(y.data().iter().all(|&v| v == 7));
    }

    #[test]
    fn identity_weights_pass_input_within_one_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::from_fn(&[6, 10], |_| rng.gen_range(-1.5..2.0));
        let xq = act_params(&x, 8);
        // identity with the scale matched to the unit diagonal
        let w = Tensor::from_fn(&[6, 6], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        let wq = weight_params(&w, 0).unwrap();
        let y = int8_conv1d_k1(
            &quantize_i8(&x, &xq, 0).unwrap(),
            &xq,
            &quantize_i8(&w, &wq, 0).unwrap(),
            &wq,
            &[0; 6],
            &xq,
        )
        .unwrap();
        let got = dequantize_i8(&y, &xq, 0).unwrap();
        let input = fake_quant(&x, &xq).unwrap();
        assert!(got.max_abs_diff(&input) <= xq.scale[0] * 1.0001);
    }

    #[test]
    fn int_affine_matches_free_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for bits in [8u8, 16] {
            let l = random_layer(&mut rng);
            let xq = act_params(&l.x, bits);
            let wq = weight_params(&l.w, 0).unwrap();
            let wi = quantize_i8(&l.w, &wq, 0).unwrap();
            let oq = QuantParams::per_tensor(0.01, 3, bits).unwrap();
            let layer = IntAffine::new(wi.clone(), wq.scale.clone(), Some(&l.b), xq.clone(), Some(oq.clone())).unwrap();
            let got = layer.forward(&l.x).unwrap();
            let bias = quantize_bias(l.b.data(), xq.scale[0], &wq.scale);
            let want = if bits == 8 {
                let b32: Vec<i32> = bias.iter().map(|&v| v as i32).collect();
                let y = int8_conv1d_k1(&quantize_i8(&l.x, &xq, 0).unwrap(), &xq, &wi, &wq, &b32, &oq).unwrap();
                dequantize_i8(&y, &oq, 0).unwrap()
            } else {
                let y = int16_conv1d_k1(&quantize_i16(&l.x, &xq, 0).unwrap(), &xq, &wi, &wq, &bias, &oq).unwrap();
                dequantize_i16(&y, &oq, 0).unwrap()
            };
            assert_eq!(got, want);

            // without output params the accumulator is dequantized directly
            let raw = IntAffine::new(wi, wq.scale.clone(), Some(&l.b), xq.clone(), None).unwrap();
            let sim = simulate(&l.x, &xq, &wq, &bias, &l.w);
            assert!(raw.forward(&l.x).unwrap().max_abs_diff(&sim) < 1e-4);
        }
    }

    #[test]
    fn layer_shape_errors() {
        let q = QuantParams::per_tensor(0.1, 0, 8).unwrap();
        let w = Tensor::<i8>::zeros(&[2, 3]);
        let x = Tensor::<i8>::zeros(&[4, 1]);
        let wq = QuantParams::symmetric(vec![0.1, 0.1], 8).unwrap();
        assert!(matches!(int8_conv1d_k1(&x, &q, &w, &wq, &[0, 0], &q), Err(Error::Config(_))));
        let x = Tensor::<i8>::zeros(&[3, 1]);
        assert!(matches!(int8_conv1d_k1(&x, &q, &w, &wq, &[0], &q), Err(Error::Config(_))));
    }

    #[test]
    fn bf16_affine_rounds_everything() {
        let w = Tensor::new(&[1, 2], vec![1.0 + 1.0 / 512.0, 1.0]).unwrap();
        let x = Tensor::new(&[2, 1], vec![1.0, 1.0 / 256.0 + 1.0 / 131072.0]).unwrap();
        let y = bf16_affine(&w, None, &x).unwrap();
        // w0 -> 1.0 and x1 -> 1/256 (ties to even); 1 + 1/256 -> 1.0 in bf16
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(bf16_round(y.data()[0]), y.data()[0]);
    }

    #[test]
    fn cells_zero_fixed_point() {
        let z = Tensor::zeros(&[8, 3]);
        let mut s = LstmState::zeros(2, 3);
        bf16_cell(&z, &z, &mut s).unwrap();
        assert!(s.h.data().iter().chain(s.c.data()).all(|&v| v == 0.0));
        let cq = QuantParams::asymmetric_from_range(-2.0, 2.0, 8).unwrap();
        int8_cell(&z, &z, &mut s, &cq).unwrap();
        assert!(s.h.data().iter().chain(s.c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn bf16_cell_close_to_float_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let gx = Tensor::from_fn(&[16, 9], |_| rng.gen_range(-3.0..3.0));
        let gh = Tensor::from_fn(&[16, 9], |_| rng.gen_range(-3.0..3.0));
        let init = LstmState { h: Tensor::from_fn(&[4, 9], |_| rng.gen_range(-1.0..1.0)), c: Tensor::from_fn(&[4, 9], |_| rng.gen_range(-2.0..2.0)) };
        let (mut a, mut b) = (init.clone(), init);
        crate::model::graph::float_cell(&gx, &gh, &mut a).unwrap();
        bf16_cell(&gx, &gh, &mut b).unwrap();
        assert!(a.c.max_abs_diff(&b.c) < 0.05);
        assert!(a.h.max_abs_diff(&b.h) < 0.05);
        assert!(b.c.data().iter().all(|&v| bf16_round(v) == v));
    }
}
