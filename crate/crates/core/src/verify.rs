//! Self-checks against independent oracles, runnable on any host.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::{FrameConfig, Stft};
use crate::error::Result;
use crate::io::{from_bytes, to_bytes};
use crate::metrics::si_sdr;
use crate::model::params::{ConvLstmParams, Dense};
use crate::model::reference::reference_batched_lstm_step;
use crate::model::{conv_batched_lstm_step, LstmState, Model, ModelConfig};
use crate::quant::{
    fake_quant, int8_conv1d_k1, quantize_bias, quantize_i8, weight_params, QuantParams,
};
use crate::tensor::Tensor;

/// Outcome of one suite. `measured` is the worst case observed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<20} {:.3e} (limit {:.0e}) {}", self.name, self.measured, self.tolerance, self.detail)
    }
}

fn result(name: &'static str, measured: f64, tolerance: f64, inclusive: bool, detail: String) -> SuiteResult {
    let passed = if inclusive { measured <= tolerance } else { measured < tolerance };
    SuiteResult { name, passed: passed && measured.is_finite(), measured, tolerance, detail }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Conv-batched LSTM against the per-bin reference over 100 random draws.
pub fn lstm_oracle(seed: u64) -> Result<SuiteResult> {
    let (c, h, f) = (32, 32, 81);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let p = ConvLstmParams {
            w_x: uniform(&mut rng, &[4 * h, c], 0.5),
            w_h: uniform(&mut rng, &[4 * h, h], 0.5),
            bias: uniform(&mut rng, &[4 * h], 0.5),
            proj: Dense { weight: uniform(&mut rng, &[c, h], 0.5), bias: uniform(&mut rng, &[c], 0.5) },
        };
        let x = uniform(&mut rng, &[c, f], 1.0);
        let state = LstmState { h: uniform(&mut rng, &[h, f], 1.0), c: uniform(&mut rng, &[h, f], 2.0) };
        let (want, want_state) = reference_batched_lstm_step(&x, &p, &state)?;
        let mut got_state = state.clone();
        let got = conv_batched_lstm_step(&x, &p, &mut got_state)?;
        worst = worst
            .max(got.max_abs_diff(&want))
            .max(got_state.h.max_abs_diff(&want_state.h))
            .max(got_state.c.max_abs_diff(&want_state.c));
    }
    Ok(result("lstm-oracle", f64::from(worst), 1e-6, false, "100 draws, output and both states".into()))
}

/// Streaming analysis and synthesis of 1 s of noise, relative RMS error on
/// the interior.
pub fn stft_round_trip(seed: u64) -> Result<SuiteResult> {
    let cfg = FrameConfig::default();
    let stft = Stft::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hop = cfg.hop_len;
    let n = cfg.sample_rate as usize;
    let signal: Vec<f32> = (0..n.div_ceil(hop) * hop).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut state = stft.new_state(1);
    let mut out = Vec::with_capacity(signal.len());
    for chunk in signal.chunks(hop) {
        let frame = stft.stft_step(chunk, &mut state)?;
        out.extend_from_slice(stft.istft_step(&frame, &mut state)?.data());
    }
    let delay = cfg.sample_delay();
    let (mut err, mut energy) = (0.0f64, 0.0f64);
    for i in cfg.win_len..n - cfg.win_len {
        err += (f64::from(out[i + delay]) - f64::from(signal[i])).powi(2);
        energy += f64::from(signal[i]).powi(2);
    }
    Ok(result("stft-roundtrip", (err / energy).sqrt(), 1e-6, false, "1 s noise, interior".into()))
}

/// Chunked streaming against the whole-signal forward pass on the default
/// model, 2 s of noise.
pub fn streaming_offline(seed: u64) -> Result<SuiteResult> {
    let model = Model::init_random(ModelConfig::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let x: Vec<f32> = (0..32_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let d = model.process(&x, None)?.max_abs_diff(&model.forward_offline(&x, None)?);
    Ok(result("streaming-offline", f64::from(d), 1e-5, false, "default model, 2 s".into()))
}

/// Perturbs chunk k of a 50-chunk stream and checks that every earlier
/// output chunk is bit-identical.
pub fn causality(seed: u64) -> Result<SuiteResult> {
    let model = Model::init_random(ModelConfig::default(), seed)?;
    let hop = model.hop_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let x: Vec<f32> = (0..50 * hop).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let base = model.process(&x, None)?;
    let s = base.dim(0);
    let mut changed_before = 0usize;
    for k in [5usize, 25, 49] {
        let mut y = x.clone();
        y[k * hop..(k + 1) * hop].iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let out = model.process(&y, None)?;
        for sp in 0..s {
            let row = |t: &Tensor| t.data()[sp * 50 * hop..sp * 50 * hop + k * hop].to_vec();
            changed_before += row(&base).iter().zip(row(&out)).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
    }
    Ok(result("causality", changed_before as f64, 0.0, true, "k in {5, 25, 49} of 50 chunks".into()))
}

/// Integer kernel against its fake-quant float simulation on 100 random
/// layers; worst output difference in LSBs.
pub fn quant_lsb(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0i32;
    for _ in 0..100 {
        let (m, k, n) = (rng.gen_range(1..48), rng.gen_range(1..160), rng.gen_range(1..82));
        let (lo, hi) = (rng.gen_range(-3.0f32..0.0), rng.gen_range(0.1f32..3.0));
        let x = Tensor::from_fn(&[k, n], |_| rng.gen_range(lo..hi));
        let ws = rng.gen_range(0.01f32..1.0);
        let w = uniform(&mut rng, &[m, k], ws);
        let b = uniform(&mut rng, &[m], 1.0);
        let xq = QuantParams::asymmetric_from_range(lo, hi, 8)?;
        let wq = weight_params(&w, 0)?;
        let bias = quantize_bias(b.data(), xq.scale[0], &wq.scale);
        let (xf, wf) = (fake_quant(&x, &xq)?, fake_quant(&w, &wq)?);
        let sim = Tensor::from_fn(&[m, n], |i| {
            let (r, c) = (i / n, i % n);
            let mut acc = bias[r] as f64 * f64::from(xq.scale[0]) * f64::from(wq.scale[r]);
            for kk in 0..k {
                acc += f64::from(wf.data()[r * k + kk]) * f64::from(xf.data()[kk * n + c]);
            }
            acc as f32
        });
        let (slo, shi) = sim.data().iter().fold((0.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
        let oq = QuantParams::asymmetric_from_range(slo, shi, 8)?;
        let b32: Vec<i32> = bias.iter().map(|&v| v as i32).collect();
        let got = int8_conv1d_k1(&quantize_i8(&x, &xq, 0)?, &xq, &quantize_i8(&w, &wq, 0)?, &wq, &b32, &oq)?;
        let want = quantize_i8(&sim, &oq, 0)?;
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((i32::from(*a) - i32::from(*b)).abs());
        }
    }
    Ok(result("quant-lsb", f64::from(worst), 1.0, true, "100 random int8 layers, LSB".into()))
}

/// Idempotence, the half-step bound, monotonicity and symmetric-scheme sign
/// symmetry of fake quantization.
pub fn fake_quant_properties(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut idem, mut bound, mut mono, mut sign) = (0usize, 0usize, 0usize, 0usize);
    for bits in [8u8, 16] {
        for _ in 0..50 {
            let (lo, hi) = (rng.gen_range(-5.0f32..0.0), rng.gen_range(0.01f32..5.0));
            let qp = QuantParams::asymmetric_from_range(lo, hi, bits)?;
            let mut xs: Vec<f32> = (0..256).map(|_| rng.gen_range(lo..hi)).collect();
            xs.sort_by(f32::total_cmp);
            let x = Tensor::new(&[xs.len()], xs)?;
            let y = fake_quant(&x, &qp)?;
            idem += usize::from(fake_quant(&y, &qp)? != y);
            let half = f64::from(qp.scale[0]) / 2.0;
            // the bound holds on the representable range, which the zero
            // point's rounding can shift by up to half a step; the
            // dequantized value is itself an f32
            let (rlo, rhi) = (qp.dequantize(qp.qmin(), 0), qp.dequantize(qp.qmax(), 0));
            bound += x
                .data()
                .iter()
                .zip(y.data())
                .filter(|(a, b)| {
                    let slack = f64::from(f32::EPSILON) * f64::from(a.abs());
                    (rlo..=rhi).contains(*a) && (f64::from(**a) - f64::from(**b)).abs() > half + slack
                })
                .count();
            mono += y.data().windows(2).filter(|w| w[1] < w[0]).count();
        }
        for _ in 0..50 {
            let qp = QuantParams::symmetric(vec![rng.gen_range(1e-4f32..2.0)], bits)?;
            // the lone most negative code has no positive twin
            let reach = (qp.qmax() as f32 + 0.5) * qp.scale[0];
            let x = Tensor::from_fn(&[256], |_| rng.gen_range(-reach..reach));
            let neg = Tensor::from_fn(&[256], |i| -x.data()[i]);
            let (y, yn) = (fake_quant(&x, &qp)?, fake_quant(&neg, &qp)?);
            sign += y.data().iter().zip(yn.data()).filter(|(a, b)| **a != -**b).count();
        }
    }
    let detail = format!("violations: idempotence {idem}, bound {bound}, monotonicity {mono}, sign {sign}");
    Ok(result("fake-quant", (idem + bound + mono + sign) as f64, 0.0, true, detail))
}

/// Closed-form SI-SDR examples and exact scale invariance.
pub fn si_sdr_checks(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = si_sdr(&[1.0, 0.0], &[1.0, 1.0])?.abs();
    // values on a 1/1024 grid keep every product with c exact in f32
    let r: Vec<f32> = (0..256).map(|_| f32::from(rng.gen_range(-1024i16..1024)) / 1024.0).collect();
    let e: Vec<f32> = (0..256).map(|_| f32::from(rng.gen_range(-1024i16..1024)) / 1024.0).collect();
    let base = si_sdr(&r, &e)?;
    for c in [3.0f32, -5.0, 0.25, 7.0, -0.125] {
        let scaled: Vec<f32> = e.iter().map(|v| v * c).collect();
        worst = worst.max((si_sdr(&r, &scaled)? - base).abs());
    }
    Ok(result("si-sdr", worst, 1e-9, false, "[1,0] vs [1,1] and scale invariance, dB".into()))
}

/// Save and reload of a random model; worst output difference.
pub fn container_round_trip(seed: u64) -> Result<SuiteResult> {
    let model = Model::init_random(ModelConfig::default(), seed)?;
    let back = from_bytes(&to_bytes(&model)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let x: Vec<f32> = (0..96 * 20).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let d = model.process(&x, None)?.max_abs_diff(&back.process(&x, None)?);
    Ok(result("container-roundtrip", f64::from(d), 0.0, true, "f32 default model".into()))
}

/// Every suite, in order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        lstm_oracle(seed)?,
        stft_round_trip(seed)?,
        streaming_offline(seed)?,
        causality(seed)?,
        quant_lsb(seed)?,
        fake_quant_properties(seed)?,
        si_sdr_checks(seed)?,
        container_round_trip(seed)?,
    ])
}
