//! Textbook per-bin recurrent cells, used as correctness oracles for the
//! conv-batched LSTM and as timing baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::graph::LstmState;
use super::params::ConvLstmParams;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, tanh, Tensor};

fn dot(w: &[f32], x: &[f32]) -> f32 {
    let mut acc = 0.0;
    for (a, b) in w.iter().zip(x) {
        acc += a * b;
    }
    acc
}

/// Single-vector LSTM cell: `x` is `[C]`, `h` and `c` are `[H]` and are
/// updated in place. Gate rows are packed `i, f, g, o`.
pub fn lstm_cell_step(w_x: &[f32], w_h: &[f32], bias: &[f32], x: &[f32], h: &mut [f32], c: &mut [f32]) {
    let hid = h.len();
    let cin = x.len();
    let mut gates = vec![0.0f32; 4 * hid];
    for (r, g) in gates.iter_mut().enumerate() {
        let gx = bias[r] + dot(&w_x[r * cin..(r + 1) * cin], x);
        let gh = dot(&w_h[r * hid..(r + 1) * hid], h);
        *g = gx + gh;
    }
    for j in 0..hid {
        let i_g = sigmoid(gates[j]);
        let f_g = sigmoid(gates[hid + j]);
        let g_g = tanh(gates[2 * hid + j]);
        let o_g = sigmoid(gates[3 * hid + j]);
        c[j] = f_g * c[j] + i_g * g_g;
        h[j] = o_g * tanh(c[j]);
    }
}

/// One time step of the block LSTM computed bin by bin: `inputs` is
/// `[C, F']`, states are `[H, F']`. Returns the projected output (with the
/// residual input added) and the new state; `state` is not modified.
pub fn reference_batched_lstm_step(
    inputs: &Tensor,
    params: &ConvLstmParams,
    state: &LstmState,
) -> Result<(Tensor, LstmState)> {
    if inputs.ndim() != 2 {
        return Err(Error::config("reference LSTM takes [C, F'] input"));
    }
    let (cin, bins) = (inputs.dim(0), inputs.dim(1));
    let hid = params.hidden();
    params.w_x.expect_shape(&[4 * hid, cin], "w_x")?;
    state.h.expect_shape(&[hid, bins], "hidden state")?;
    state.c.expect_shape(&[hid, bins], "cell state")?;
    let cout = params.proj.weight.dim(0);
    let mut next = state.clone();
    let mut out = Tensor::zeros(&[cout, bins]);
    let mut x = vec![0.0f32; cin];
    let mut h = vec![0.0f32; hid];
    let mut c = vec![0.0f32; hid];
    for f in 0..bins {
        for (ci, v) in x.iter_mut().enumerate() {
            *v = inputs.data()[ci * bins + f];
        }
        for j in 0..hid {
            h[j] = state.h.data()[j * bins + f];
            c[j] = state.c.data()[j * bins + f];
        }
        lstm_cell_step(params.w_x.data(), params.w_h.data(), params.bias.data(), &x, &mut h, &mut c);
        for j in 0..hid {
            next.h.data_mut()[j * bins + f] = h[j];
            next.c.data_mut()[j * bins + f] = c[j];
        }
        for co in 0..cout {
            let w = &params.proj.weight.data()[co * hid..(co + 1) * hid];
            let y = params.proj.bias.data()[co] + dot(w, &h);
            out.data_mut()[co * bins + f] = y + x[co];
        }
    }
    Ok((out, next))
}

/// Weights of one direction of an LSTM.
#[derive(Debug, Clone)]
struct Direction {
    w_x: Vec<f32>,
    w_h: Vec<f32>,
    bias: Vec<f32>,
}

/// Bidirectional LSTM run sequentially across frequency bins within one
/// frame, projected back to the latent channels with a residual. The
/// classic dual-path frequency stage, kept as a timing baseline.
#[derive(Debug, Clone)]
pub struct BiLstmFrequencyStage {
    channels: usize,
    hidden: usize,
    fwd: Direction,
    bwd: Direction,
    /// `[C, 2H]`
    proj_w: Vec<f32>,
    proj_b: Vec<f32>,
}

impl BiLstmFrequencyStage {
    pub fn param_count_for(channels: usize, hidden: usize) -> usize {
        2 * (4 * hidden * (channels + hidden) + 4 * hidden) + 2 * hidden * channels + channels
    }

    /// Hidden size whose parameter count is closest to one block's mixer stage.
    pub fn matched_hidden(cfg: &ModelConfig) -> usize {
        let b = cfg.param_breakdown();
        let target = b.mixers / cfg.blocks;
        (1..=4 * target.max(1))
            .min_by_key(|&h| Self::param_count_for(cfg.channels, h).abs_diff(target))
            .unwrap_or(1)
    }

    pub fn init_random(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let mut dir = || Direction {
            w_x: draw(4 * hidden * channels),
            w_h: draw(4 * hidden * hidden),
            bias: draw(4 * hidden),
        };
        let fwd = dir();
        let bwd = dir();
        let proj_w = draw(channels * 2 * hidden);
        let proj_b = draw(channels);
        BiLstmFrequencyStage { channels, hidden, fwd, bwd, proj_w, proj_b }
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.channels, self.hidden)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `[C, F']` to `[C, F']`.
    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        let (c, bins) = (latent.dim(0), latent.dim(1));
        if c != self.channels {
            return Err(Error::config(format!("BiLSTM stage built for {} channels, got {c}", self.channels)));
        }
        let hid = self.hidden;
        let column = |f: usize| -> Vec<f32> { (0..c).map(|ci| latent.data()[ci * bins + f]).collect() };
        let cols: Vec<Vec<f32>> = (0..bins).map(column).collect();
        let mut hs = vec![vec![0.0f32; 2 * hid]; bins];
        let (mut h, mut cs) = (vec![0.0f32; hid], vec![0.0f32; hid]);
        for f in 0..bins {
            lstm_cell_step(&self.fwd.w_x, &self.fwd.w_h, &self.fwd.bias, &cols[f], &mut h, &mut cs);
            hs[f][..hid].copy_from_slice(&h);
        }
        h.fill(0.0);
        cs.fill(0.0);
        for f in (0..bins).rev() {
            lstm_cell_step(&self.bwd.w_x, &self.bwd.w_h, &self.bwd.bias, &cols[f], &mut h, &mut cs);
            hs[f][hid..].copy_from_slice(&h);
        }
        let mut out = Tensor::zeros(&[c, bins]);
        for (f, hf) in hs.iter().enumerate() {
            for co in 0..c {
                let w = &self.proj_w[co * 2 * hid..(co + 1) * 2 * hid];
                out.data_mut()[co * bins + f] = self.proj_b[co] + dot(w, hf) + cols[f][co];
            }
        }
        Ok(out)
    }
}
