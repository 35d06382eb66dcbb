//! Compiling a precision plan into per-node kernels, range calibration and
//! plan application.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{bf16_affine_rounded, bf16_cell, int8_cell, IntAffine};
use super::{dequantize_i8, quantize_i8, weight_params, PrecisionPlan, Precision, QuantParams, RangeObserver};
use crate::error::{Error, Result};
use crate::model::graph::{decompress_matrix, float_affine, float_cell, lstm_step_with, Exec, FloatExec, LstmState, MixerLayer, NodeKey, NodeKind};
use crate::model::params::{ConvLstmParams, ConvParams, ModelParams};
use crate::model::{Model, ModelConfig, NoListener};
use crate::tensor::ops::{conv2d_columns, conv_transpose2d_columns, transposed_weight_matrix};
use crate::tensor::{bf16_round, conv2d_causal, conv_transpose2d_causal, ConvSpec, Tensor};

/// An int8 weight tensor in its schema layout with per-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub values: Tensor<i8>,
    pub params: QuantParams,
    /// Axis of `values` that the scales index.
    pub axis: usize,
}

impl QuantizedWeight {
    /// Symmetric per-channel int8 quantization along `axis`.
    pub fn quantize(weight: &Tensor, axis: usize) -> Result<Self> {
        let params = weight_params(weight, axis)?;
        Ok(QuantizedWeight { values: quantize_i8(weight, &params, axis)?, params, axis })
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        dequantize_i8(&self.values, &self.params, self.axis)
    }
}

/// Weight and bias of a node in the schema layout.
fn node_params(p: &ModelParams, node: NodeKey) -> Result<(&Tensor, Option<&Tensor>)> {
    let missing = || Error::Schema(format!("model has no parameters for node '{node}'"));
    Ok(match node {
        NodeKey::Encoder => (&p.encoder.weight, Some(&p.encoder.bias)),
        NodeKey::Decoder => (&p.decoder.weight, Some(&p.decoder.bias)),
        NodeKey::FilmGamma | NodeKey::FilmBeta => {
            let film = p.film.as_ref().ok_or_else(missing)?;
            let d = if node == NodeKey::FilmGamma { &film.gamma } else { &film.beta };
            (&d.weight, Some(&d.bias))
        }
        NodeKey::CompressDown | NodeKey::CompressUp => {
            let cp = p.compress.as_ref().ok_or_else(missing)?;
            let c = if node == NodeKey::CompressDown { &cp.down } else { &cp.up };
            (&c.weight, Some(&c.bias))
        }
        NodeKey::Mixer { block, rep, layer } => {
            let mx = p.blocks.get(block - 1).and_then(|b| b.mixers.get(rep - 1)).ok_or_else(missing)?;
            let d = match layer {
                MixerLayer::TokenFc1 => &mx.token_fc1,
                MixerLayer::TokenFc2 => &mx.token_fc2,
                MixerLayer::ChannelFc1 => &mx.channel_fc1,
                MixerLayer::ChannelFc2 => &mx.channel_fc2,
            };
            (&d.weight, Some(&d.bias))
        }
        NodeKey::GatesX(b) | NodeKey::GatesH(b) | NodeKey::Proj(b) => {
            let l = &p.blocks.get(b - 1).ok_or_else(missing)?.lstm;
            match node {
                NodeKey::GatesX(_) => (&l.w_x, Some(&l.bias)),
                NodeKey::GatesH(_) => (&l.w_h, None),
                _ => (&l.proj.weight, Some(&l.proj.bias)),
            }
        }
        NodeKey::Cell(_) => return Err(missing()),
    })
}

/// The node's weight as the `[rows, inner]` matrix its kernel multiplies
/// with, and the matching per-row bias.
fn matrix_form(node: NodeKey, w: &Tensor, b: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
    Ok(match node {
        NodeKey::Encoder | NodeKey::CompressDown => {
            let rows = w.dim(0);
            let inner = w.len() / rows;
            (w.clone().reshape(&[rows, inner])?, b.cloned())
        }
        NodeKey::Decoder => (transposed_weight_matrix(w), b.cloned()),
        NodeKey::CompressUp => {
            let bias = b.cloned().unwrap_or_else(|| Tensor::zeros(&[w.dim(1)]));
            let (wm, bm) = decompress_matrix(&ConvParams { weight: w.clone(), bias });
            (wm, Some(bm))
        }
        _ => (w.clone(), b.cloned()),
    })
}

/// Integer kernel for a node from its quantized weight.
fn int_kernel(
    node: NodeKey,
    q: &QuantizedWeight,
    bias: Option<&Tensor>,
    input: QuantParams,
    output: Option<QuantParams>,
) -> Result<IntAffine> {
    let codes = q.values.map(f32::from);
    let scales = Tensor::from_fn(q.values.shape(), |i| {
        let inner: usize = q.values.shape()[q.axis + 1..].iter().product();
        q.params.scale[(i / inner) % q.values.dim(q.axis)]
    });
    let (wm, bm) = matrix_form(node, &codes, bias)?;
    let (sm, _) = matrix_form(node, &scales, None)?;
    let inner = wm.dim(1);
    let row_scale: Vec<f32> = (0..wm.dim(0)).map(|r| sm.data()[r * inner]).collect();
    let wi = wm.map(|v| v as i8);
    IntAffine::new(wi, row_scale, bm.as_ref(), input, output)
}

#[derive(Debug, Clone)]
enum AffineKernel {
    Float,
    Bf16 { weight: Tensor, bias: Option<Tensor> },
    Int(IntAffine),
}

#[derive(Debug, Clone)]
enum EdgeKernel {
    Float,
    Bf16(ConvParams),
    Int(IntAffine),
}

#[derive(Debug, Clone)]
enum CellKernel {
    Float,
    Bf16,
    Int8(QuantParams),
}

/// Per-node kernels of a precision plan.
#[derive(Debug, Clone)]
pub struct CompiledPlan {
    affine: HashMap<NodeKey, AffineKernel>,
    encoder: EdgeKernel,
    decoder: EdgeKernel,
    cells: HashMap<usize, CellKernel>,
}

fn bf16_tensor(t: &Tensor) -> Tensor {
    t.map(bf16_round)
}

impl CompiledPlan {
    /// Builds kernels for every node of `plan`. `params` holds effective
    /// weights (dequantized or bf16-rounded), `quantized` the int8 weights.
    pub fn compile(
        cfg: &ModelConfig,
        params: &ModelParams,
        quantized: &BTreeMap<String, QuantizedWeight>,
        plan: &PrecisionPlan,
    ) -> Result<Self> {
        plan.validate(cfg)?;
        let mut out = CompiledPlan {
            affine: HashMap::new(),
            encoder: EdgeKernel::Float,
            decoder: EdgeKernel::Float,
            cells: HashMap::new(),
        };
        for node in NodeKey::all(cfg) {
            let a = plan.get(node).expect("validated plan");
            if let NodeKey::Cell(b) = node {
                let k = match a.activation {
                    Precision::F32 => CellKernel::Float,
                    Precision::Bf16 => CellKernel::Bf16,
                    _ => CellKernel::Int8(a.state.clone().expect("validated plan")),
                };
                out.cells.insert(b, k);
                continue;
            }
            let (w, b) = node_params(params, node)?;
            let int = || -> Result<IntAffine> {
                let name = node.weight_tensor().expect("weighted node");
                let q = quantized
                    .get(&name)
                    .ok_or_else(|| Error::Schema(format!("missing int8 weights for '{name}'")))?;
                let input = a.input.clone().expect("validated plan");
                let output = if a.requantize { a.output.clone() } else { None };
                int_kernel(node, q, b, input, output)
            };
            if node.kind() == NodeKind::EdgeConv {
                let k = match a.weight {
                    Precision::F32 => EdgeKernel::Float,
                    Precision::Bf16 => EdgeKernel::Bf16(ConvParams {
                        weight: bf16_tensor(w),
                        bias: bf16_tensor(b.expect("conv bias")),
                    }),
                    _ => EdgeKernel::Int(int()?),
                };
                if node == NodeKey::Encoder {
                    out.encoder = k;
                } else {
                    out.decoder = k;
                }
                continue;
            }
            let k = match a.weight {
                Precision::F32 => AffineKernel::Float,
                Precision::Bf16 => {
                    let (wm, bm) = matrix_form(node, w, b)?;
                    AffineKernel::Bf16 { weight: bf16_tensor(&wm), bias: bm.as_ref().map(bf16_tensor) }
                }
                _ => AffineKernel::Int(int()?),
            };
            out.affine.insert(node, k);
        }
        Ok(out)
    }
}

/// `[C, F, 2]` history and a `[C, F]` frame as a `[C, F, 3]` window (oldest
/// first), plus the next history.
fn window_with(history: &Tensor, frame: &Tensor) -> (Tensor, Tensor) {
    let (c, f, h) = (history.dim(0), history.dim(1), history.dim(2));
    let window = Tensor::from_fn(&[c, f, h + 1], |i| {
        let (row, k) = (i / (h + 1), i % (h + 1));
        if k < h {
            history.data()[row * h + k]
        } else {
            frame.data()[row]
        }
    });
    let next = Tensor::from_fn(&[c, f, h], |i| window.data()[(i / h) * (h + 1) + i % h + 1]);
    (window, next)
}

fn check_history(history: &Tensor, channels: usize, bins: usize) -> Result<()> {
    history.expect_shape(&[channels, bins, 2], "conv history")
}

impl Exec for CompiledPlan {
    fn affine(&self, node: NodeKey, weight: &Tensor, bias: Option<&Tensor>, x: &Tensor, relu: bool) -> Result<Tensor> {
        let y = match self.affine.get(&node) {
            None => return Err(Error::config(format!("no kernel compiled for node '{node}'"))),
            Some(AffineKernel::Float) => return float_affine(weight, bias, x, relu),
            Some(AffineKernel::Bf16 { weight, bias }) => bf16_affine_rounded(weight, bias.as_ref(), x)?,
            Some(AffineKernel::Int(k)) => k.forward(x)?,
        };
        Ok(if relu { y.map(|v| v.max(0.0)) } else { y })
    }

    fn encoder(&self, frame: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
        match &self.encoder {
            EdgeKernel::Float => FloatExec.encoder(frame, params, history),
            EdgeKernel::Bf16(p) => {
                let spec = ConvSpec::causal_3x3(2, p.weight.dim(0));
                let (y, h) = conv2d_causal(&bf16_tensor(frame), &spec, &p.weight, &p.bias, history)?;
                *history = h;
                let (c, f) = (y.dim(0), y.dim(1));
                bf16_tensor(&y).reshape(&[c, f])
            }
            EdgeKernel::Int(k) => {
                frame.ensure_finite("encoder input")?;
                let (c, f) = (frame.dim(0), frame.dim(1));
                check_history(history, c, f)?;
                let spec = ConvSpec::causal_3x3(c, params.weight.dim(0));
                let (window, next) = window_with(history, &frame.clone().reshape(&[c, f])?);
                let y = k.forward(&conv2d_columns(&window, &spec))?;
                *history = next;
                Ok(y)
            }
        }
    }

    fn decoder(&self, latent: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
        match &self.decoder {
            EdgeKernel::Float => FloatExec.decoder(latent, params, history),
            EdgeKernel::Bf16(p) => {
                let spec = ConvSpec::transposed_3x3(p.weight.dim(0), p.weight.dim(1));
                let x = bf16_tensor(latent).reshape(&[latent.dim(0), latent.dim(1), 1])?;
                let (y, h) = conv_transpose2d_causal(&x, &spec, &p.weight, &p.bias, history)?;
                *history = h;
                Ok(bf16_tensor(&y))
            }
            EdgeKernel::Int(k) => {
                latent.ensure_finite("decoder input")?;
                let (c, f) = (latent.dim(0), latent.dim(1));
                check_history(history, c, f)?;
                let spec = ConvSpec::transposed_3x3(c, params.weight.dim(1));
                let (window, next) = window_with(history, latent);
                let y = k.forward(&conv_transpose2d_columns(&window, &spec))?;
                *history = next;
                let s2 = y.dim(0);
                y.reshape(&[s2, f, 1])
            }
        }
    }

    fn lstm_cell(&self, node: NodeKey, gx: &Tensor, gh: &Tensor, state: &mut LstmState) -> Result<()> {
        let block = node.block().unwrap_or(0);
        match self.cells.get(&block) {
            None => Err(Error::config(format!("no kernel compiled for node '{node}'"))),
            Some(CellKernel::Float) => float_cell(gx, gh, state),
            Some(CellKernel::Bf16) => bf16_cell(gx, gh, state),
            Some(CellKernel::Int8(qp)) => int8_cell(gx, gh, state, qp),
        }
    }
}

#[derive(Debug, Clone)]
struct NodeRanges {
    input: RangeObserver,
    output: RangeObserver,
    state: RangeObserver,
}

impl Default for NodeRanges {
    fn default() -> Self {
        NodeRanges {
            input: RangeObserver::per_tensor(),
            output: RangeObserver::per_tensor(),
            state: RangeObserver::per_tensor(),
        }
    }
}

/// Float execution that records the range of every activation edge.
#[derive(Debug, Default)]
struct Calibrator {
    ranges: RefCell<BTreeMap<NodeKey, NodeRanges>>,
}

impl Calibrator {
    fn record(&self, node: NodeKey, input: Option<&Tensor>, output: Option<&Tensor>, state: Option<&Tensor>) -> Result<()> {
        let mut map = self.ranges.borrow_mut();
        let r = map.entry(node).or_default();
        if let Some(x) = input {
            r.input.observe(x.data())?;
        }
        if let Some(y) = output {
            r.output.observe(y.data())?;
        }
        if let Some(c) = state {
            r.state.observe(c.data())?;
        }
        Ok(())
    }
}

impl Exec for Calibrator {
    fn affine(&self, node: NodeKey, weight: &Tensor, bias: Option<&Tensor>, x: &Tensor, relu: bool) -> Result<Tensor> {
        let y = float_affine(weight, bias, x, relu)?;
        self.record(node, Some(x), Some(&y), None)?;
        Ok(y)
    }

    fn encoder(&self, frame: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
        let y = FloatExec.encoder(frame, params, history)?;
        self.record(NodeKey::Encoder, Some(frame), Some(&y), None)?;
        Ok(y)
    }

    fn decoder(&self, latent: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
        let y = FloatExec.decoder(latent, params, history)?;
        self.record(NodeKey::Decoder, Some(latent), Some(&y), None)?;
        Ok(y)
    }

    fn lstm_cell(&self, node: NodeKey, gx: &Tensor, gh: &Tensor, state: &mut LstmState) -> Result<()> {
        float_cell(gx, gh, state)?;
        self.record(node, None, None, Some(&state.c))
    }
}

/// Runs the float model over `audio` (one utterance per entry) and fills the
/// activation parameters that `plan` needs from the observed ranges.
pub fn calibrate(
    model: &Model,
    audio: &[Vec<f32>],
    embedding: Option<&[f32]>,
    mut plan: PrecisionPlan,
) -> Result<PrecisionPlan> {
    if !model.plan().is_float() {
        return Err(Error::config("calibration needs a float model"));
    }
    if audio.iter().all(|u| u.is_empty()) {
        return Err(Error::config("calibration set is empty"));
    }
    let cal = Calibrator::default();
    let hop = model.hop_len();
    let mut chunk = vec![0.0f32; hop];
    for utt in audio.iter().filter(|u| !u.is_empty()) {
        let mut state = model.new_state();
        for piece in utt.chunks(hop) {
            chunk.fill(0.0);
            chunk[..piece.len()].copy_from_slice(piece);
            model.forward_chunk_exec(&cal, &chunk, &mut state, embedding, &mut NoListener)?;
        }
    }
    let ranges = cal.ranges.into_inner();
    for node in NodeKey::all(model.config()) {
        let Some(a) = plan.get_mut(node) else { continue };
        let Some(bits) = a.activation.bits() else { continue };
        let r = ranges
            .get(&node)
            .ok_or_else(|| Error::config(format!("node '{node}' was never executed during calibration")))?;
        if node.kind() == NodeKind::Cell {
            a.state = Some(r.state.asymmetric(bits)?);
        } else {
            a.input = Some(r.input.asymmetric(bits)?);
            if a.requantize {
                a.output = Some(r.output.asymmetric(bits)?);
            }
        }
    }
    Ok(plan)
}

/// Quantizes a float model's weights as `plan` prescribes and returns a model
/// that runs every node at its assigned precision. The plan must be complete
/// and calibrated.
pub fn apply_plan(model: &Model, plan: PrecisionPlan) -> Result<Model> {
    if !model.plan().is_float() {
        return Err(Error::config("apply_plan takes a float model"));
    }
    let cfg = model.config();
    plan.validate(cfg)?;
    let mut params = model.params().clone();
    let mut quantized = BTreeMap::new();
    let mut failure = None;
    for node in NodeKey::all(cfg) {
        let (Some(name), Some(a)) = (node.weight_tensor(), plan.get(node)) else { continue };
        let weight = a.weight;
        params.visit_mut(&mut |n, t| {
            if n != name || failure.is_some() {
                return;
            }
            match weight {
                Precision::Int8 => match QuantizedWeight::quantize(t, node.weight_channel_axis())
                    .and_then(|q| Ok((q.dequantize()?, q)))
                {
                    Ok((deq, q)) => {
                        *t = deq;
                        quantized.insert(name.clone(), q);
                    }
                    Err(e) => failure = Some(e),
                },
                Precision::Bf16 => *t = bf16_tensor(t),
                _ => {}
            }
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    assemble(cfg.clone(), params, plan, quantized)
}

/// Builds a model from effective weights, a plan and its int8 weights.
pub(crate) fn assemble(
    cfg: ModelConfig,
    params: ModelParams,
    plan: PrecisionPlan,
    quantized: BTreeMap<String, QuantizedWeight>,
) -> Result<Model> {
    let exec = CompiledPlan::compile(&cfg, &params, &quantized, &plan)?;
    Ok(Model::new(cfg, params)?.with_exec(plan, Arc::new(exec), quantized))
}

/// The block LSTM under mixed precision: int8 gate and projection
/// convolutions dequantized straight from their accumulators, and a bf16
/// cell in which every elementwise op is rounded.
#[derive(Debug, Clone)]
pub struct MixedLstm {
    exec: CompiledPlan,
    params: ConvLstmParams,
}

impl MixedLstm {
    /// `input_qp` covers the block input, `hidden_qp` the hidden state.
    pub fn new(params: &ConvLstmParams, input_qp: QuantParams, hidden_qp: QuantParams) -> Result<Self> {
        let mut affine = HashMap::new();
        let mut effective = params.clone();
        let layers = [
            (NodeKey::GatesX(1), &params.w_x, Some(&params.bias), &input_qp, &mut effective.w_x),
            (NodeKey::GatesH(1), &params.w_h, None, &hidden_qp, &mut effective.w_h),
            (NodeKey::Proj(1), &params.proj.weight, Some(&params.proj.bias), &hidden_qp, &mut effective.proj.weight),
        ];
        for (node, w, b, qp, eff) in layers {
            let q = QuantizedWeight::quantize(w, 0)?;
            *eff = q.dequantize()?;
            affine.insert(node, AffineKernel::Int(int_kernel(node, &q, b, qp.clone(), None)?));
        }
        let cells = HashMap::from([(1, CellKernel::Bf16)]);
        let exec = CompiledPlan { affine, encoder: EdgeKernel::Float, decoder: EdgeKernel::Float, cells };
        Ok(MixedLstm { exec, params: effective })
    }

    /// Same contract as [`crate::model::conv_batched_lstm_step`].
    pub fn step(&self, latent: &Tensor, state: &mut LstmState) -> Result<Tensor> {
        lstm_step_with(&self.exec, 1, latent, &self.params, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::conv_batched_lstm_step;
    use crate::model::params::Dense;
    use crate::quant::{fake_quant, PRESETS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { blocks: 2, channels: 8, hidden: 6, mixer_expansion: 1.5, ..Default::default() }
    }

    fn speechlike(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = 0.0f32;
        (0..n)
            .map(|i| {
                env = 0.999 * env + 0.001 * rng.gen_range(0.0..1.0);
                let t = i as f32 / 16000.0;
                let tone = (2.0 * std::f32::consts::PI * 220.0 * t).sin() + 0.5 * (2.0 * std::f32::consts::PI * 470.0 * t).sin();
                0.3 * tone * (0.5 + env) + 0.05 * rng.gen_range(-1.0..1.0)
            })
            .collect()
    }

    #[test]
    fn fp32_plan_is_bit_identical() {
        let model = Model::init_random(small_cfg(), 1).unwrap();
        let plan = calibrate(&model, &[speechlike(960, 1)], None, PrecisionPlan::float(model.config())).unwrap();
        let same = apply_plan(&model, plan).unwrap();
        let x = speechlike(96 * 12, 2);
        assert_eq!(model.process(&x, None).unwrap(), same.process(&x, None).unwrap());
    }

    #[test]
    fn every_preset_runs_and_stays_close() {
        for cfg in [small_cfg(), ModelConfig { compression: 2, ..small_cfg() }] {
            let model = Model::init_random(cfg, 2).unwrap();
            let calib = vec![speechlike(4000, 3), speechlike(3000, 4)];
            let x = speechlike(96 * 30, 5);
            let reference = model.process(&x, None).unwrap();
            for name in PRESETS {
                let plan = calibrate(&model, &calib, None, PrecisionPlan::preset(name, model.config()).unwrap()).unwrap();
                let q = apply_plan(&model, plan).unwrap();
                let y = q.process(&x, None).unwrap();
                assert!(y.is_finite());
                let err = y.max_abs_diff(&reference);
                let peak = reference.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
                assert!(err < 0.25 * peak + 1e-3, "{name}: {err} vs peak {peak}");
                if name != "fp32" {
                    assert!(err > 0.0, "{name} changed nothing");
                }
            }
        }
    }

    #[test]
    fn apply_plan_rejects_incomplete_and_quantized_input() {
        let model = Model::init_random(small_cfg(), 3).unwrap();
        let plan = PrecisionPlan::preset("int8", model.config()).unwrap();
        assert!(matches!(apply_plan(&model, plan.clone()), Err(Error::Config(_))));
        let plan = calibrate(&model, &[speechlike(960, 1)], None, plan).unwrap();
        let q = apply_plan(&model, plan.clone()).unwrap();
        assert!(matches!(apply_plan(&q, plan), Err(Error::Config(_))));
        assert!(matches!(calibrate(&model, &[], None, PrecisionPlan::float(model.config())), Err(Error::Config(_))));
    }

    #[test]
    fn int8_weights_dequantize_into_params() {
        let model = Model::init_random(small_cfg(), 4).unwrap();
        let plan = calibrate(&model, &[speechlike(960, 1)], None, PrecisionPlan::preset("mix-lstm-fpconv", model.config()).unwrap()).unwrap();
        let q = apply_plan(&model, plan).unwrap();
        let qw = &q.quantized_weights()["blocks.1.lstm.w_x"];
        assert_eq!(qw.dequantize().unwrap(), q.params().blocks[0].lstm.w_x);
        assert!(!q.quantized_weights().contains_key("encoder.weight"));
        assert!(q.params().encoder.weight.data().iter().all(|&v| bf16_round(v) == v));
        assert!(!q.quantized_weights().contains_key("decoder.weight"));
        let plan = calibrate(&model, &[speechlike(960, 1)], None, PrecisionPlan::preset("int8", model.config()).unwrap()).unwrap();
        let q = apply_plan(&model, plan).unwrap();
        assert_eq!(q.quantized_weights()["decoder.weight"].axis, 1);
    }

    fn rel_lsb(a: &Tensor, b: &Tensor, qp: &QuantParams) -> f32 {
        a.max_abs_diff(b) / qp.scale[0]
    }

    #[test]
    fn int_edge_convs_match_fake_quant_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, f, s2) = (5, 9, 4);
        let enc = ConvParams {
            weight: Tensor::from_fn(&[c, 2, 3, 3], |_| rng.gen_range(-0.5..0.5)),
            bias: Tensor::from_fn(&[c], |_| rng.gen_range(-0.2..0.2)),
        };
        let dec = ConvParams {
            weight: Tensor::from_fn(&[c, s2, 3, 3], |_| rng.gen_range(-0.5..0.5)),
            bias: Tensor::from_fn(&[s2], |_| rng.gen_range(-0.2..0.2)),
        };
        let in_qp = QuantParams::asymmetric_from_range(-2.0, 2.0, 8).unwrap();
        let out_qp = QuantParams::asymmetric_from_range(-4.0, 4.0, 8).unwrap();
        let qe = QuantizedWeight::quantize(&enc.weight, 0).unwrap();
        let qd = QuantizedWeight::quantize(&dec.weight, 1).unwrap();
        let ke = int_kernel(NodeKey::Encoder, &qe, Some(&enc.bias), in_qp.clone(), Some(out_qp.clone())).unwrap();
        let kd = int_kernel(NodeKey::Decoder, &qd, Some(&dec.bias), in_qp.clone(), Some(out_qp.clone())).unwrap();
        let exec = CompiledPlan {
            affine: HashMap::new(),
            encoder: EdgeKernel::Int(ke),
            decoder: EdgeKernel::Int(kd),
            cells: HashMap::new(),
        };
        let enc_fq = ConvParams { weight: qe.dequantize().unwrap(), bias: enc.bias.clone() };
        let dec_fq = ConvParams { weight: qd.dequantize().unwrap(), bias: dec.bias.clone() };
        let (mut h_int, mut h_sim) = (Tensor::zeros(&[2, f, 2]), Tensor::zeros(&[2, f, 2]));
        let (mut d_int, mut d_sim) = (Tensor::zeros(&[c, f, 2]), Tensor::zeros(&[c, f, 2]));
        for _ in 0..5 {
            let frame = Tensor::from_fn(&[2, f, 1], |_| rng.gen_range(-2.0..2.0));
            let y = exec.encoder(&frame, &enc, &mut h_int).unwrap();
            let sim = FloatExec.encoder(&fake_quant(&frame, &in_qp).unwrap(), &enc_fq, &mut h_sim).unwrap();
            assert!(rel_lsb(&y, &fake_quant(&sim, &out_qp).unwrap(), &out_qp) <= 1.0001);

            let latent = Tensor::from_fn(&[c, f], |_| rng.gen_range(-2.0..2.0));
            let y = exec.decoder(&latent, &dec, &mut d_int).unwrap();
            let sim = FloatExec.decoder(&fake_quant(&latent, &in_qp).unwrap(), &dec_fq, &mut d_sim).unwrap();
            assert!(rel_lsb(&y, &fake_quant(&sim, &out_qp).unwrap(), &out_qp) <= 1.0001);
        }
    }

    #[test]
    fn int_compress_up_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, a) = (4, 4);
        let up = ConvParams {
            weight: Tensor::from_fn(&[c, c, a], |_| rng.gen_range(-0.5..0.5)),
            bias: Tensor::from_fn(&[c], |_| rng.gen_range(-0.2..0.2)),
        };
        let q = QuantizedWeight::quantize(&up.weight, 1).unwrap();
        let in_qp = QuantParams::asymmetric_from_range(-1.0, 1.0, 8).unwrap();
        let k = int_kernel(NodeKey::CompressUp, &q, Some(&up.bias), in_qp.clone(), None).unwrap();
        let x = Tensor::from_fn(&[c, 6], |_| rng.gen_range(-1.0..1.0));
        let (wm, bm) = decompress_matrix(&ConvParams { weight: q.dequantize().unwrap(), bias: up.bias.clone() });
        let sim = float_affine(&wm, Some(&bm), &fake_quant(&x, &in_qp).unwrap(), false).unwrap();
        assert!(k.forward(&x).unwrap().max_abs_diff(&sim) < 1e-4);
    }

    fn rand_lstm(rng: &mut ChaCha8Rng, c: usize, h: usize) -> ConvLstmParams {
        let mut t = |shape: &[usize], s: f32| Tensor::from_fn(shape, |_| rng.gen_range(-s..s));
        ConvLstmParams {
            w_x: t(&[4 * h, c], 0.4),
            w_h: t(&[4 * h, h], 0.4),
            bias: t(&[4 * h], 0.2),
            proj: Dense { weight: t(&[c, h], 0.4), bias: t(&[c], 0.1) },
        }
    }

    #[test]
    fn mixed_lstm_zero_everything() {
        let p = ConvLstmParams::zeros(4, 3);
        let qp = QuantParams::asymmetric_from_range(-1.0, 1.0, 8).unwrap();
        let m = MixedLstm::new(&p, qp.clone(), qp).unwrap();
        let mut st = LstmState::zeros(3, 5);
        let x = Tensor::from_fn(&[4, 5], |i| i as f32 * 0.1 - 0.7);
        let y = m.step(&x, &mut st).unwrap();
        assert_eq!(y, x);
        assert!(st.h.data().iter().chain(st.c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_lstm_close_to_float_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, h, f) = (32, 32, 81);
        let p = rand_lstm(&mut rng, c, h);
        let in_qp = QuantParams::asymmetric_from_range(-1.0, 1.0, 8).unwrap();
        let h_qp = QuantParams::asymmetric_from_range(-1.0, 1.0, 8).unwrap();
        let m = MixedLstm::new(&p, in_qp, h_qp).unwrap();
        let x = Tensor::from_fn(&[c, f], |_| rng.gen_range(-1.0..1.0));
        let (mut a, mut b) = (LstmState::zeros(h, f), LstmState::zeros(h, f));
        let ya = conv_batched_lstm_step(&x, &p, &mut a).unwrap();
        let yb = m.step(&x, &mut b).unwrap();
        let norm = |t: &Tensor| t.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        let diff = Tensor::from_fn(ya.shape(), |i| ya.data()[i] - yb.data()[i]);
        // int8 gate inputs dominate; the relative error stays in the percent range
        assert!(norm(&diff) / norm(&ya) < 5e-2, "{}", norm(&diff) / norm(&ya));
        for _ in 0..100 {
            let x = Tensor::from_fn(&[c, f], |_| rng.gen_range(-1.0..1.0));
            m.step(&x, &mut b).unwrap();
        }
        assert!(b.is_finite());
        assert!(b.c.data().iter().all(|v| v.abs() <= 100.0));
        assert!(b.h.data().iter().all(|v| v.abs() <= 1.0));
    }
}
