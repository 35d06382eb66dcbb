//! Post-training quantization: quantization parameters, range calibration,
//! fake-quant simulation, integer and bf16 kernels, and precision plans.
//!
//! Weights are quantized symmetric per output channel (int8, `qmax = 127`),
//! activations asymmetric per tensor (int8 or int16). Rounding is always
//! round-half-to-even.

mod exec;
mod kernels;
mod plan;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use exec::{apply_plan, calibrate, CompiledPlan, MixedLstm, QuantizedWeight};
pub(crate) use exec::assemble;
pub use kernels::{
    bf16_affine, dequantize_accumulators, int16_conv1d_k1, int8_conv1d_k1, quantize_bias, IntAffine,
};
pub use plan::{NodeAssignment, PrecisionPlan, PRESETS};

/// Smallest scale ever produced by calibration; avoids division by zero on
/// constant-zero tensors.
pub const SCALE_FLOOR: f32 = 1e-8;

/// Storage precision of a weight tensor or an activation edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    Bf16,
    Int8,
    Int16,
}

impl Precision {
    pub fn is_int(self) -> bool {
        matches!(self, Precision::Int8 | Precision::Int16)
    }

    pub fn bits(self) -> Option<u8> {
        match self {
            Precision::Int8 => Some(8),
            Precision::Int16 => Some(16),
            _ => None,
        }
    }
}

/// Scale and zero point of a signed integer mapping. One scale means
/// per-tensor; several mean per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: i32,
    pub bits: u8,
    pub symmetric: bool,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32, bits: u8) -> Result<Self> {
        let qp = QuantParams { scale: vec![scale], zero_point, bits, symmetric: false };
        qp.validate()?;
        Ok(qp)
    }

    pub fn symmetric(scale: Vec<f32>, bits: u8) -> Result<Self> {
        let qp = QuantParams { scale, zero_point: 0, bits, symmetric: true };
        qp.validate()?;
        Ok(qp)
    }

    /// Asymmetric parameters covering `[min, max]`, widened to contain zero so
    /// that zero padding is exact.
    pub fn asymmetric_from_range(min: f32, max: f32, bits: u8) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::config(format!("invalid range [{min}, {max}]")));
        }
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let (qmin, qmax) = qrange(bits)?;
        if hi - lo == 0.0 {
            return Self::per_tensor(SCALE_FLOOR, 0, bits);
        }
        let scale = (((f64::from(hi) - f64::from(lo)) / f64::from(qmax - qmin)) as f32).max(SCALE_FLOOR);
        let zp = (f64::from(qmin) - f64::from(lo) / f64::from(scale)).round_ties_even();
        let zp = (zp as i32).clamp(qmin, qmax);
        Self::per_tensor(scale, zp, bits)
    }

    /// Symmetric per-channel parameters from each channel's largest magnitude.
    pub fn symmetric_from_absmax(absmax: &[f32], bits: u8) -> Result<Self> {
        let (_, qmax) = qrange(bits)?;
        let scale = absmax
            .iter()
            .map(|&m| {
                if m.is_finite() {
                    Ok(((f64::from(m) / f64::from(qmax)) as f32).max(SCALE_FLOOR))
                } else {
                    Err(Error::Numeric("non-finite weight range".into()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::symmetric(scale, bits)
    }

    pub fn validate(&self) -> Result<()> {
        let (qmin, qmax) = qrange(self.bits)?;
        if self.scale.is_empty() {
            return Err(Error::config("quantization parameters without a scale"));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("quantization scale must be positive, got {s}")));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::config("symmetric quantization requires zero_point 0"));
        }
        if !(qmin..=qmax).contains(&self.zero_point) {
            return Err(Error::config(format!("zero point {} outside [{qmin}, {qmax}]", self.zero_point)));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Integer code of `x` for `channel`.
    #[inline]
    pub fn quantize(&self, x: f32, channel: usize) -> i32 {
        let q = (f64::from(x) / f64::from(self.scale[channel])).round_ties_even() + f64::from(self.zero_point);
        q.clamp(f64::from(self.qmin()), f64::from(self.qmax())) as i32
    }

    #[inline]
    pub fn dequantize(&self, q: i32, channel: usize) -> f32 {
        (f64::from(q - self.zero_point) * f64::from(self.scale[channel])) as f32
    }
}

/// `[qmin, qmax]` of a signed `bits`-bit integer.
pub fn qrange(bits: u8) -> Result<(i32, i32)> {
    match bits {
        8 | 16 => Ok((-(1 << (bits - 1)), (1 << (bits - 1)) - 1)),
        _ => Err(Error::config(format!("unsupported bit width {bits}; use 8 or 16"))),
    }
}

type ChannelFn = Box<dyn Fn(usize) -> usize>;

fn channel_of(shape: &[usize], axis: usize, channels: usize) -> Result<ChannelFn> {
    if channels == 1 {
        return Ok(Box::new(|_| 0));
    }
    if axis >= shape.len() || shape[axis] != channels {
        return Err(Error::config(format!(
            "{channels} channel scales do not match axis {axis} of shape {shape:?}"
        )));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    Ok(Box::new(move |i| (i / inner) % n))
}

/// Quantize-dequantize with per-channel scales along `axis`.
pub fn fake_quant_axis(x: &Tensor, qp: &QuantParams, axis: usize) -> Result<Tensor> {
    qp.validate()?;
    let ch = channel_of(x.shape(), axis, qp.channels())?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let c = ch(i);
        qp.dequantize(qp.quantize(x.data()[i], c), c)
    }))
}

/// `(clamp(round(x / scale) + zp, qmin, qmax) - zp) * scale`, per-channel
/// scales along axis 0.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    fake_quant_axis(x, qp, 0)
}

/// Integer codes of `x` under `qp`, per-channel along `axis`.
pub fn quantize_codes(x: &Tensor, qp: &QuantParams, axis: usize) -> Result<Vec<i32>> {
    qp.validate()?;
    let ch = channel_of(x.shape(), axis, qp.channels())?;
    Ok(x.data().iter().enumerate().map(|(i, &v)| qp.quantize(v, ch(i))).collect())
}

pub fn quantize_i8(x: &Tensor, qp: &QuantParams, axis: usize) -> Result<Tensor<i8>> {
    if qp.bits != 8 {
        return Err(Error::config("quantize_i8 needs 8-bit parameters"));
    }
    let codes = quantize_codes(x, qp, axis)?;
    Tensor::new(x.shape(), codes.into_iter().map(|q| q as i8).collect())
}

pub fn quantize_i16(x: &Tensor, qp: &QuantParams, axis: usize) -> Result<Tensor<i16>> {
    if qp.bits != 16 {
        return Err(Error::config("quantize_i16 needs 16-bit parameters"));
    }
    let codes = quantize_codes(x, qp, axis)?;
    Tensor::new(x.shape(), codes.into_iter().map(|q| q as i16).collect())
}

pub fn dequantize_i8(q: &Tensor<i8>, qp: &QuantParams, axis: usize) -> Result<Tensor> {
    let ch = channel_of(q.shape(), axis, qp.channels())?;
    Ok(Tensor::from_fn(q.shape(), |i| qp.dequantize(i32::from(q.data()[i]), ch(i))))
}

pub fn dequantize_i16(q: &Tensor<i16>, qp: &QuantParams, axis: usize) -> Result<Tensor> {
    let ch = channel_of(q.shape(), axis, qp.channels())?;
    Ok(Tensor::from_fn(q.shape(), |i| qp.dequantize(i32::from(q.data()[i]), ch(i))))
}

/// Running min and max, per tensor or per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeObserver {
    min: Vec<f32>,
    max: Vec<f32>,
    count: u64,
}

impl RangeObserver {
    pub fn per_tensor() -> Self {
        Self::per_channel(1)
    }

    pub fn per_channel(channels: usize) -> Self {
        RangeObserver { min: vec![f32::INFINITY; channels], max: vec![f32::NEG_INFINITY; channels], count: 0 }
    }

    /// Folds `values` into channel 0.
    pub fn observe(&mut self, values: &[f32]) -> Result<()> {
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite value during calibration".into()));
            }
            self.min[0] = self.min[0].min(v);
            self.max[0] = self.max[0].max(v);
        }
        self.count += 1;
        Ok(())
    }

    /// Folds `x` in per channel along `axis`.
    pub fn observe_channels(&mut self, x: &Tensor, axis: usize) -> Result<()> {
        x.ensure_finite("calibration tensor")?;
        let ch = channel_of(x.shape(), axis, self.min.len())?;
        for (i, &v) in x.data().iter().enumerate() {
            let c = ch(i);
            self.min[c] = self.min[c].min(v);
            self.max[c] = self.max[c].max(v);
        }
        self.count += 1;
        Ok(())
    }

    pub fn observations(&self) -> u64 {
        self.count
    }

    pub fn min(&self) -> &[f32] {
        &self.min
    }

    pub fn max(&self) -> &[f32] {
        &self.max
    }

    pub fn asymmetric(&self, bits: u8) -> Result<QuantParams> {
        if self.count == 0 {
            return Err(Error::config("range observer has seen no data"));
        }
        if self.min.len() != 1 {
            return Err(Error::config("asymmetric activation parameters are per tensor"));
        }
        QuantParams::asymmetric_from_range(self.min[0], self.max[0], bits)
    }

    pub fn symmetric(&self, bits: u8) -> Result<QuantParams> {
        if self.count == 0 {
            return Err(Error::config("range observer has seen no data"));
        }
        let absmax: Vec<f32> = self.min.iter().zip(&self.max).map(|(a, b)| a.abs().max(b.abs())).collect();
        QuantParams::symmetric_from_absmax(&absmax, bits)
    }
}

/// Symmetric per-channel int8 parameters for a weight tensor.
pub fn weight_params(weight: &Tensor, axis: usize) -> Result<QuantParams> {
    let mut obs = RangeObserver::per_channel(weight.dim(axis));
    obs.observe_channels(weight, axis)?;
    obs.symmetric(8)
}
