//! The network's building blocks: encoder, FiLM, MLP-Mixer, conv-batched
//! LSTM, frequency compression and decoder.
//!
//! Every weighted op goes through an [`Exec`], so the same graph code runs in
//! float, under a quantized precision plan, or under a calibration recorder.
//! The free functions here are the float versions. Single-frame activations
//! are `[channels, bins]`; the singleton time axis is dropped.

use std::fmt;
use std::str::FromStr;

use super::config::ModelConfig;
use super::params::{CompressParams, ConvLstmParams, ConvParams, FilmParams, MixerParams};
use crate::error::{Error, Result};
use crate::tensor::ops::affine_columns;
use crate::tensor::{conv2d_causal, conv_transpose2d_causal, relu, sigmoid, tanh, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MixerLayer {
    TokenFc1,
    TokenFc2,
    ChannelFc1,
    ChannelFc2,
}

impl MixerLayer {
    pub const ALL: [MixerLayer; 4] = [
        MixerLayer::TokenFc1,
        MixerLayer::TokenFc2,
        MixerLayer::ChannelFc1,
        MixerLayer::ChannelFc2,
    ];

    fn as_str(self) -> &'static str {
        match self {
            MixerLayer::TokenFc1 => "token.fc1",
            MixerLayer::TokenFc2 => "token.fc2",
            MixerLayer::ChannelFc1 => "channel.fc1",
            MixerLayer::ChannelFc2 => "channel.fc2",
        }
    }
}

/// A node of the computation graph that carries its own precision.
/// Block and repetition indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKey {
    Encoder,
    FilmGamma,
    FilmBeta,
    CompressDown,
    CompressUp,
    Mixer {
        block: usize,
        rep: usize,
        layer: MixerLayer,
    },
    GatesX(usize),
    GatesH(usize),
    /// LSTM elementwise gate math and cell state.
    Cell(usize),
    Proj(usize),
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Encoder and decoder convolutions.
    EdgeConv,
    /// Kernel-1 convolutions inside the LSTM, plus compression convs.
    Conv,
    /// Mixer MLP layers.
    Mlp,
    Film,
    Cell,
}

impl NodeKey {
    /// Every node of a model with this configuration, in execution order.
    pub fn all(cfg: &ModelConfig) -> Vec<NodeKey> {
        let mut out = vec![NodeKey::Encoder];
        if cfg.film {
            out.extend([NodeKey::FilmGamma, NodeKey::FilmBeta]);
        }
        if cfg.compression > 1 {
            out.push(NodeKey::CompressDown);
        }
        for block in 1..=cfg.blocks {
            for rep in 1..=cfg.mixer_reps {
                for layer in MixerLayer::ALL {
                    out.push(NodeKey::Mixer { block, rep, layer });
                }
            }
            out.extend([
                NodeKey::GatesX(block),
                NodeKey::GatesH(block),
                NodeKey::Cell(block),
                NodeKey::Proj(block),
            ]);
        }
        if cfg.compression > 1 {
            out.push(NodeKey::CompressUp);
        }
        out.push(NodeKey::Decoder);
        out
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            NodeKey::Encoder | NodeKey::Decoder => NodeKind::EdgeConv,
            NodeKey::CompressDown
            | NodeKey::CompressUp
            | NodeKey::GatesX(_)
            | NodeKey::GatesH(_)
            | NodeKey::Proj(_) => NodeKind::Conv,
            NodeKey::Mixer { .. } => NodeKind::Mlp,
            NodeKey::FilmGamma | NodeKey::FilmBeta => NodeKind::Film,
            NodeKey::Cell(_) => NodeKind::Cell,
        }
    }

    /// 1-based block index for nodes inside an MLPNet block.
    pub fn block(&self) -> Option<usize> {
        match *self {
            NodeKey::Mixer { block, .. }
            | NodeKey::GatesX(block)
            | NodeKey::GatesH(block)
            | NodeKey::Cell(block)
            | NodeKey::Proj(block) => Some(block),
            _ => None,
        }
    }

    /// Schema name of the node's weight tensor.
    pub fn weight_tensor(&self) -> Option<String> {
        Some(match self {
            NodeKey::Encoder => "encoder.weight".into(),
            NodeKey::Decoder => "decoder.weight".into(),
            NodeKey::FilmGamma => "film.gamma.weight".into(),
            NodeKey::FilmBeta => "film.beta.weight".into(),
            NodeKey::CompressDown => "compress.down.weight".into(),
            NodeKey::CompressUp => "compress.up.weight".into(),
            NodeKey::Mixer { block, rep, layer } => {
                format!("blocks.{block}.mixer.{rep}.{}.weight", layer.as_str())
            }
            NodeKey::GatesX(b) => format!("blocks.{b}.lstm.w_x"),
            NodeKey::GatesH(b) => format!("blocks.{b}.lstm.w_h"),
            NodeKey::Proj(b) => format!("blocks.{b}.lstm.proj.weight"),
            NodeKey::Cell(_) => return None,
        })
    }

    /// Weight axis that indexes output channels.
    pub fn weight_channel_axis(&self) -> usize {
        match self {
            NodeKey::Decoder | NodeKey::CompressUp => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKey::Encoder => f.write_str("encoder"),
            NodeKey::FilmGamma => f.write_str("film.gamma"),
            NodeKey::FilmBeta => f.write_str("film.beta"),
            NodeKey::CompressDown => f.write_str("compress.down"),
            NodeKey::CompressUp => f.write_str("compress.up"),
            NodeKey::Mixer { block, rep, layer } => {
                write!(f, "blocks.{block}.mixer.{rep}.{}", layer.as_str())
            }
            NodeKey::GatesX(b) => write!(f, "blocks.{b}.lstm.gates_x"),
            NodeKey::GatesH(b) => write!(f, "blocks.{b}.lstm.gates_h"),
            NodeKey::Cell(b) => write!(f, "blocks.{b}.lstm.cell"),
            NodeKey::Proj(b) => write!(f, "blocks.{b}.lstm.proj"),
            NodeKey::Decoder => f.write_str("decoder"),
        }
    }
}

impl FromStr for NodeKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("unknown graph node '{s}'"));
        match s {
            "encoder" => return Ok(NodeKey::Encoder),
            "decoder" => return Ok(NodeKey::Decoder),
            "film.gamma" => return Ok(NodeKey::FilmGamma),
            "film.beta" => return Ok(NodeKey::FilmBeta),
            "compress.down" => return Ok(NodeKey::CompressDown),
            "compress.up" => return Ok(NodeKey::CompressUp),
            _ => {}
        }
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() < 4 || parts[0] != "blocks" {
            return Err(bad());
        }
        let block: usize = parts[1].parse().map_err(|_| bad())?;
        match &parts[2..] {
            ["lstm", "gates_x"] => Ok(NodeKey::GatesX(block)),
            ["lstm", "gates_h"] => Ok(NodeKey::GatesH(block)),
            ["lstm", "cell"] => Ok(NodeKey::Cell(block)),
            ["lstm", "proj"] => Ok(NodeKey::Proj(block)),
            ["mixer", rep, a, b] => {
                let rep: usize = rep.parse().map_err(|_| bad())?;
                let layer = MixerLayer::ALL
                    .into_iter()
                    .find(|l| l.as_str() == format!("{a}.{b}"))
                    .ok_or_else(bad)?;
                Ok(NodeKey::Mixer { block, rep, layer })
            }
            _ => Err(bad()),
        }
    }
}

/// Per-frequency LSTM state, `[H, F']` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize, bins: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden, bins]),
            c: Tensor::zeros(&[hidden, bins]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.c.is_finite()
    }
}

/// Executes the weighted nodes of the graph at some precision.
pub trait Exec {
    /// `W x + b` over the columns of `x` (`[K, N]` in, `[M, N]` out), with an
    /// optional fused ReLU.
    fn affine(
        &self,
        node: NodeKey,
        weight: &Tensor,
        bias: Option<&Tensor>,
        x: &Tensor,
        relu: bool,
    ) -> Result<Tensor>;

    /// One encoder frame: `[2, F, 1]` in, `[C, F]` out.
    fn encoder(&self, frame: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor>;

    /// One decoder frame: `[C, F]` in, `[2S, F, 1]` out.
    fn decoder(&self, latent: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor>;

    /// Gate nonlinearities and state update from the two gate convolutions.
    fn lstm_cell(&self, node: NodeKey, gx: &Tensor, gh: &Tensor, state: &mut LstmState) -> Result<()>;
}

/// Plain f32 execution.
#[derive(Debug, Clone, Copy, Default)]
pub struct FloatExec;

pub(crate) fn float_affine(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor, fuse_relu: bool) -> Result<Tensor> {
    let (m, k) = (weight.dim(0), weight.dim(1));
    if x.ndim() != 2 || x.dim(0) != k {
        return Err(Error::config(format!(
            "affine: weight [{m}, {k}] cannot take input {:?}",
            x.shape()
        )));
    }
    if let Some(b) = bias {
        b.expect_shape(&[m], "affine bias")?;
    }
    let n = x.dim(1);
    let mut out = affine_columns(weight.data(), bias.map(|b| b.data()), x.data(), m, k, n);
    if fuse_relu {
        out.iter_mut().for_each(|v| *v = relu(*v));
    }
    Tensor::new(&[m, n], out)
}

/// Float LSTM gate math on `[4H, N]` gate pre-activations.
pub(crate) fn float_cell(gx: &Tensor, gh: &Tensor, state: &mut LstmState) -> Result<()> {
    let (hid, n) = (state.h.dim(0), state.h.dim(1));
    gx.expect_shape(&[4 * hid, n], "input gates")?;
    gh.expect_shape(&[4 * hid, n], "recurrent gates")?;
    let (gx, gh) = (gx.data(), gh.data());
    let gate = |g: usize, j: usize, f: usize| {
        let idx = (g * hid + j) * n + f;
        gx[idx] + gh[idx]
    };
    let c = state.c.data_mut();
    let mut h_new = vec![0.0; hid * n];
    for j in 0..hid {
        for f in 0..n {
            let i_g = sigmoid(gate(0, j, f));
            let f_g = sigmoid(gate(1, j, f));
            let g_g = tanh(gate(2, j, f));
            let o_g = sigmoid(gate(3, j, f));
            let idx = j * n + f;
            let c_new = f_g * c[idx] + i_g * g_g;
            c[idx] = c_new;
            h_new[idx] = o_g * tanh(c_new);
        }
    }
    state.h.data_mut().copy_from_slice(&h_new);
    Ok(())
}

impl Exec for FloatExec {
    fn affine(&self, _node: NodeKey, weight: &Tensor, bias: Option<&Tensor>, x: &Tensor, relu: bool) -> Result<Tensor> {
        float_affine(weight, bias, x, relu)
    }

    fn encoder(&self, frame: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
        let spec = ConvSpec::causal_3x3(2, params.weight.dim(0));
        let (y, h) = conv2d_causal(frame, &spec, &params.weight, &params.bias, history)?;
        *history = h;
        let (c, f) = (y.dim(0), y.dim(1));
        y.reshape(&[c, f])
    }

    fn decoder(&self, latent: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
        let spec = ConvSpec::transposed_3x3(params.weight.dim(0), params.weight.dim(1));
        let x = latent.clone().reshape(&[latent.dim(0), latent.dim(1), 1])?;
        let (y, h) = conv_transpose2d_causal(&x, &spec, &params.weight, &params.bias, history)?;
        *history = h;
        Ok(y)
    }

    fn lstm_cell(&self, _node: NodeKey, gx: &Tensor, gh: &Tensor, state: &mut LstmState) -> Result<()> {
        float_cell(gx, gh, state)
    }
}

/// Causal 3x3 encoder on one `[2, F, 1]` frame; `history` holds the two
/// previous input frames and is advanced in place.
pub fn encode(frame: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
    FloatExec.encoder(frame, params, history)
}

/// Causal 3x3 transposed-conv decoder on one `[C, F]` latent frame.
pub fn decode(latent: &Tensor, params: &ConvParams, history: &mut Tensor) -> Result<Tensor> {
    FloatExec.decoder(latent, params, history)
}

pub(crate) fn film_apply_with(
    exec: &dyn Exec,
    latent: &Tensor,
    embedding: &[f32],
    params: Option<&FilmParams>,
) -> Result<Tensor> {
    let params = params.ok_or_else(|| Error::config("FiLM applied to a model without FiLM"))?;
    let e = Tensor::new(&[embedding.len(), 1], embedding.to_vec())?;
    e.ensure_finite("embedding")?;
    let gamma = exec.affine(NodeKey::FilmGamma, &params.gamma.weight, Some(&params.gamma.bias), &e, false)?;
    let beta = exec.affine(NodeKey::FilmBeta, &params.beta.weight, Some(&params.beta.bias), &e, false)?;
    let (c, f) = (latent.dim(0), latent.dim(1));
    if gamma.dim(0) != c {
        return Err(Error::config(format!("FiLM heads give {} channels, latent has {c}", gamma.dim(0))));
    }
    Ok(Tensor::from_fn(&[c, f], |i| {
        let ch = i / f;
        gamma.data()[ch] * latent.data()[i] + beta.data()[ch]
    }))
}

/// `out[c, f] = gamma[c] * latent[c, f] + beta[c]`, with gamma and beta
/// computed from the speaker embedding. Errors when `params` is `None`.
pub fn film_apply(latent: &Tensor, embedding: &[f32], params: Option<&FilmParams>) -> Result<Tensor> {
    film_apply_with(&FloatExec, latent, embedding, params)
}

pub(crate) fn mixer_rep_with(
    exec: &dyn Exec,
    block: usize,
    rep: usize,
    x: &Tensor,
    p: &MixerParams,
) -> Result<Tensor> {
    let key = |layer| NodeKey::Mixer { block, rep, layer };
    // Frequency (token) mixing: the same MLP for every channel.
    let xt = x.transpose2();
    let h = exec.affine(key(MixerLayer::TokenFc1), &p.token_fc1.weight, Some(&p.token_fc1.bias), &xt, true)?;
    let y = exec.affine(key(MixerLayer::TokenFc2), &p.token_fc2.weight, Some(&p.token_fc2.bias), &h, false)?;
    let x = x.add(&y.transpose2())?;
    // Channel mixing: the same MLP for every frequency bin.
    let h = exec.affine(key(MixerLayer::ChannelFc1), &p.channel_fc1.weight, Some(&p.channel_fc1.bias), &x, true)?;
    let y = exec.affine(key(MixerLayer::ChannelFc2), &p.channel_fc2.weight, Some(&p.channel_fc2.bias), &h, false)?;
    x.add(&y)
}

pub(crate) fn mixer_forward_with(
    exec: &dyn Exec,
    block: usize,
    latent: &Tensor,
    mixers: &[MixerParams],
) -> Result<Tensor> {
    let mut x = latent.clone();
    for (i, p) in mixers.iter().enumerate() {
        x = mixer_rep_with(exec, block, i + 1, &x, p)?;
    }
    Ok(x)
}

/// All mixer repetitions of one block on a `[C, F']` frame. Each repetition
/// is a residual frequency-mixing MLP followed by a residual channel-mixing
/// MLP, ReLU inside, no normalization.
pub fn mixer_forward(latent: &Tensor, mixers: &[MixerParams]) -> Result<Tensor> {
    mixer_forward_with(&FloatExec, 0, latent, mixers)
}

pub(crate) fn lstm_step_with(
    exec: &dyn Exec,
    block: usize,
    latent: &Tensor,
    p: &ConvLstmParams,
    state: &mut LstmState,
) -> Result<Tensor> {
    if !state.is_finite() {
        return Err(Error::Numeric(format!(
            "block {block} LSTM state is non-finite; reset the stream"
        )));
    }
    let hid = p.hidden();
    let bins = latent.dim(1);
    state.h.expect_shape(&[hid, bins], "LSTM hidden state")?;
    state.c.expect_shape(&[hid, bins], "LSTM cell state")?;
    let gx = exec.affine(NodeKey::GatesX(block), &p.w_x, Some(&p.bias), latent, false)?;
    let gh = exec.affine(NodeKey::GatesH(block), &p.w_h, None, &state.h, false)?;
    exec.lstm_cell(NodeKey::Cell(block), &gx, &gh, state)?;
    let y = exec.affine(NodeKey::Proj(block), &p.proj.weight, Some(&p.proj.bias), &state.h, false)?;
    y.add(latent)
}

/// One LSTM time step for every frequency bin at once: the gate affine maps
/// are kernel-1 convolutions over the bin axis. Returns the projected hidden
/// state plus the residual input; `state` is advanced in place.
pub fn conv_batched_lstm_step(latent: &Tensor, params: &ConvLstmParams, state: &mut LstmState) -> Result<Tensor> {
    lstm_step_with(&FloatExec, 0, latent, params, state)
}

/// Unfolds `[C, F]` into `[C*alpha, ceil(F/alpha)]` stride-`alpha` windows,
/// zero-padding the tail.
fn compress_columns(latent: &Tensor, alpha: usize) -> Tensor {
    let (c, f) = (latent.dim(0), latent.dim(1));
    let fc = f.div_ceil(alpha);
    Tensor::from_fn(&[c * alpha, fc], |i| {
        let (row, j) = (i / fc, i % fc);
        let (ci, k) = (row / alpha, row % alpha);
        let src = j * alpha + k;
        if src < f {
            latent.data()[ci * f + src]
        } else {
            0.0
        }
    })
}

/// `[C_in, C_out, a]` transposed-conv weights as a `[C_out*a, C_in]` matrix,
/// plus the bias repeated per tap.
pub(crate) fn decompress_matrix(up: &ConvParams) -> (Tensor, Tensor) {
    let (cin, cout, a) = (up.weight.dim(0), up.weight.dim(1), up.weight.dim(2));
    let w = Tensor::from_fn(&[cout * a, cin], |i| {
        let (row, ci) = (i / cin, i % cin);
        let (co, k) = (row / a, row % a);
        up.weight.data()[(ci * cout + co) * a + k]
    });
    let b = Tensor::from_fn(&[cout * a], |i| up.bias.data()[i / a]);
    (w, b)
}

pub(crate) fn freq_compress_with(exec: &dyn Exec, latent: &Tensor, alpha: usize, p: &CompressParams) -> Result<Tensor> {
    if alpha == 1 {
        return Ok(latent.clone());
    }
    let w = &p.down.weight;
    if w.dim(2) != alpha {
        return Err(Error::config(format!("compression kernel {} != alpha {alpha}", w.dim(2))));
    }
    let cols = compress_columns(latent, alpha);
    let wm = w.clone().reshape(&[w.dim(0), w.dim(1) * alpha])?;
    exec.affine(NodeKey::CompressDown, &wm, Some(&p.down.bias), &cols, false)
}

pub(crate) fn freq_decompress_with(
    exec: &dyn Exec,
    latent: &Tensor,
    alpha: usize,
    bins: usize,
    p: &CompressParams,
) -> Result<Tensor> {
    if alpha == 1 {
        return Ok(latent.clone());
    }
    let (wm, bm) = decompress_matrix(&p.up);
    let y = exec.affine(NodeKey::CompressUp, &wm, Some(&bm), latent, false)?;
    let (cout, fc) = (p.up.weight.dim(1), latent.dim(1));
    if fc * alpha < bins {
        return Err(Error::config("decompression cannot cover all frequency bins"));
    }
    Ok(Tensor::from_fn(&[cout, bins], |i| {
        let (co, f) = (i / bins, i % bins);
        let (j, k) = (f / alpha, f % alpha);
        y.data()[(co * alpha + k) * fc + j]
    }))
}

/// Stride-`alpha` convolution along frequency: `[C, F]` to `[C, ceil(F/alpha)]`.
/// `alpha == 1` is a passthrough.
pub fn freq_compress(latent: &Tensor, alpha: usize, params: &CompressParams) -> Result<Tensor> {
    freq_compress_with(&FloatExec, latent, alpha, params)
}

/// Matching stride-`alpha` transposed convolution back to `bins` bins.
pub fn freq_decompress(latent: &Tensor, alpha: usize, bins: usize, params: &CompressParams) -> Result<Tensor> {
    freq_decompress_with(&FloatExec, latent, alpha, bins, params)
}
