//! Streaming STFT analysis and weighted overlap-add synthesis.
//!
//! Frames are `win_len` samples advanced by `hop_len`; each new `hop_len`
//! chunk completes one frame. Synthesis divides the overlap-added output by
//! the accumulated squared window, so any window/hop pair whose squared
//! windows cover every sample works, not just COLA pairs. Output sample `n`
//! reconstructs input sample `n - (win_len - hop_len)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    SqrtHann,
}

/// Periodic window of `len` samples.
pub fn make_window(kind: WindowKind, len: usize) -> Result<Tensor> {
    if len < 2 {
        return Err(Error::config("window length must be at least 2"));
    }
    let w = match kind {
        WindowKind::SqrtHann => (0..len)
            .map(|n| {
                let v = 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos();
                v.max(0.0).sqrt() as f32
            })
            .collect(),
    };
    Tensor::new(&[len], w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub window: Vec<f32>,
    pub synthesis_window: Vec<f32>,
}

impl Default for FrameConfig {
    /// 10 ms window, 6 ms hop at 16 kHz.
    fn default() -> Self {
        Self::new(16_000, 160, 96).expect("default framing is valid")
    }
}

impl FrameConfig {
    /// Square-root Hann analysis and synthesis windows, `fft_size == win_len`.
    pub fn new(sample_rate: u32, win_len: usize, hop_len: usize) -> Result<Self> {
        let w = make_window(WindowKind::SqrtHann, win_len)?.into_data();
        let cfg = FrameConfig {
            sample_rate,
            win_len,
            hop_len,
            fft_size: win_len,
            window: w.clone(),
            synthesis_window: w,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Chunks emitted as silence while the overlap-add normalizer fills up.
    pub fn warmup_chunks(&self) -> usize {
        self.win_len.div_ceil(self.hop_len) - 1
    }

    /// Delay in samples between an input sample and its reconstruction.
    pub fn sample_delay(&self) -> usize {
        self.win_len - self.hop_len
    }

    /// Sum of squared window products at each position of a steady-state chunk.
    pub fn steady_state_norm(&self) -> Vec<f64> {
        let mut norm = vec![0.0; self.hop_len];
        for (j, slot) in norm.iter_mut().enumerate() {
            let mut pos = j;
            while pos < self.win_len {
                *slot += f64::from(self.window[pos]) * f64::from(self.synthesis_window[pos]);
                pos += self.hop_len;
            }
        }
        norm
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if !(1 <= self.hop_len && self.hop_len <= self.win_len && self.win_len <= self.fft_size) {
            return Err(Error::config(format!(
                "need hop_len <= win_len <= fft_size, got {}/{}/{}",
                self.hop_len, self.win_len, self.fft_size
            )));
        }
        if self.fft_size != self.win_len {
            return Err(Error::config("fft_size must equal win_len"));
        }
        for w in [&self.window, &self.synthesis_window] {
            if w.len() != self.win_len || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::config("windows must be win_len finite non-negative values"));
            }
        }
        if self.steady_state_norm().iter().any(|&n| n <= 1e-6) {
            return Err(Error::config(
                "window/hop pair leaves samples uncovered; overlap-add cannot be normalized",
            ));
        }
        Ok(())
    }
}

/// Mutable per-stream framing state.
#[derive(Debug, Clone, PartialEq)]
pub struct StftState {
    /// Last `win_len - hop_len` input samples.
    pub analysis_buffer: Vec<f32>,
    /// One `win_len` accumulator per output stream.
    pub ola_buffer: Vec<Vec<f32>>,
    /// Running sum of squared window products, aligned with `ola_buffer`.
    pub ola_norm: Vec<f32>,
    pub chunks_emitted: usize,
}

impl StftState {
    pub fn new(cfg: &FrameConfig, streams: usize) -> Self {
        StftState {
            analysis_buffer: vec![0.0; cfg.win_len - cfg.hop_len],
            ola_buffer: vec![vec![0.0; cfg.win_len]; streams],
            ola_norm: vec![0.0; cfg.win_len],
            chunks_emitted: 0,
        }
    }

    pub fn reset(&mut self) {
        self.analysis_buffer.fill(0.0);
        for b in &mut self.ola_buffer {
            b.fill(0.0);
        }
        self.ola_norm.fill(0.0);
        self.chunks_emitted = 0;
    }
}

/// Immutable STFT engine: framing parameters plus planned transforms.
/// Shareable across threads; per-stream state lives in [`StftState`].
#[derive(Clone)]
pub struct Stft {
    cfg: FrameConfig,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(cfg.fft_size);
        let inverse = planner.plan_fft_inverse(cfg.fft_size);
        Ok(Stft {
            cfg,
            forward,
            inverse,
        })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    pub fn new_state(&self, streams: usize) -> StftState {
        StftState::new(&self.cfg, streams)
    }

    /// Windowed DFT of one `win_len` frame; writes real parts to `out[..F]`
    /// and imaginary parts to `out[F..]`.
    fn frame_spectrum(&self, frame: &[f32], out: &mut [f32]) {
        let bins = self.cfg.bins();
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.cfg.window)
            .map(|(&x, &w)| Complex64::new(f64::from(x) * f64::from(w), 0.0))
            .collect();
        self.forward.process(&mut buf);
        for k in 0..bins {
            out[k] = buf[k].re as f32;
            out[bins + k] = buf[k].im as f32;
        }
    }

    /// Real inverse DFT of bins `0..F`, multiplied by the synthesis window.
    fn frame_synthesis(&self, re: &[f32], im: &[f32]) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let bins = self.cfg.bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..bins {
            buf[k] = Complex64::new(f64::from(re[k]), f64::from(im[k]));
        }
        // DC and (even n) Nyquist are real for a real signal.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for k in 1..n.div_ceil(2) {
            buf[n - k] = buf[k].conj();
        }
        self.inverse.process(&mut buf);
        buf.iter()
            .zip(&self.cfg.synthesis_window)
            .map(|(c, &w)| c.re / n as f64 * f64::from(w))
            .collect()
    }

    /// Consumes one hop of input and returns the `[2, F, 1]` frame ending at it.
    pub fn stft_step(&self, chunk: &[f32], state: &mut StftState) -> Result<Tensor> {
        let (win, hop) = (self.cfg.win_len, self.cfg.hop_len);
        if chunk.len() != hop {
            return Err(Error::Framing {
                expected: hop,
                got: chunk.len(),
            });
        }
        let mut frame = Vec::with_capacity(win);
        frame.extend_from_slice(&state.analysis_buffer);
        frame.extend_from_slice(chunk);
        let bins = self.cfg.bins();
        let mut out = vec![0.0; 2 * bins];
        self.frame_spectrum(&frame, &mut out);
        state.analysis_buffer.copy_from_slice(&frame[hop..]);
        Tensor::new(&[2, bins, 1], out)
    }

    /// Overlap-adds one `[2S, F, 1]` frame (channels `0..S` real, `S..2S`
    /// imaginary) and emits the `[S, hop_len]` samples it completes.
    pub fn istft_step(&self, frame: &Tensor, state: &mut StftState) -> Result<Tensor> {
        let bins = self.cfg.bins();
        let (win, hop) = (self.cfg.win_len, self.cfg.hop_len);
        let streams = state.ola_buffer.len();
        frame.expect_shape(&[2 * streams, bins, 1], "istft frame")?;
        for s in 0..streams {
            let re = &frame.data()[s * bins..(s + 1) * bins];
            let im = &frame.data()[(streams + s) * bins..(streams + s + 1) * bins];
            let y = self.frame_synthesis(re, im);
            for (acc, v) in state.ola_buffer[s].iter_mut().zip(&y) {
                *acc += *v as f32;
            }
        }
        for (n, (&wa, &ws)) in state
            .ola_norm
            .iter_mut()
            .zip(self.cfg.window.iter().zip(&self.cfg.synthesis_window))
        {
            *n += wa * ws;
        }

        let warm = state.chunks_emitted >= self.cfg.warmup_chunks();
        let mut out = vec![0.0; streams * hop];
        if warm {
            for s in 0..streams {
                for j in 0..hop {
                    let norm = state.ola_norm[j];
                    if norm <= 1e-6 {
                        return Err(Error::Numeric(format!(
                            "overlap-add normalizer vanished at offset {j}"
                        )));
                    }
                    out[s * hop + j] = state.ola_buffer[s][j] / norm;
                }
            }
        }
        for b in &mut state.ola_buffer {
            b.copy_within(hop.., 0);
            b[win - hop..].fill(0.0);
        }
        state.ola_norm.copy_within(hop.., 0);
        state.ola_norm[win - hop..].fill(0.0);
        state.chunks_emitted += 1;
        Tensor::new(&[streams, hop], out)
    }

    /// Frames a whole signal at once: `[2, F, T]` with `T = ceil(len / hop)`,
    /// laid out exactly as successive [`Stft::stft_step`] calls would produce.
    pub fn analyze(&self, signal: &[f32]) -> Result<Tensor> {
        let (win, hop) = (self.cfg.win_len, self.cfg.hop_len);
        if signal.is_empty() {
            return Err(Error::Input("empty signal".into()));
        }
        let frames = signal.len().div_ceil(hop);
        let lead = win - hop;
        let mut padded = vec![0.0; lead + frames * hop];
        padded[lead..lead + signal.len()].copy_from_slice(signal);
        let bins = self.cfg.bins();
        let mut spec = vec![0.0; 2 * bins * frames];
        let mut frame_buf = vec![0.0; 2 * bins];
        for t in 0..frames {
            self.frame_spectrum(&padded[t * hop..t * hop + win], &mut frame_buf);
            for (i, v) in frame_buf.iter().enumerate() {
                spec[i * frames + t] = *v;
            }
        }
        Tensor::new(&[2, bins, frames], spec)
    }

    /// Offline overlap-add of `[2S, F, T]` frames into `[S, T * hop]` samples,
    /// aligned and warmed up exactly like the streaming path.
    pub fn synthesize(&self, frames: &Tensor) -> Result<Tensor> {
        let bins = self.cfg.bins();
        let (win, hop) = (self.cfg.win_len, self.cfg.hop_len);
        if frames.ndim() != 3 || frames.dim(0) % 2 != 0 || frames.dim(1) != bins {
            return Err(Error::config(format!(
                "synthesize expects [2S, {bins}, T], got {:?}",
                frames.shape()
            )));
        }
        let streams = frames.dim(0) / 2;
        let t_len = frames.dim(2);
        let total = (t_len - 1) * hop + win;
        let mut acc = vec![vec![0.0f32; total]; streams];
        let mut norm = vec![0.0f32; total];
        let at = |c: usize, k: usize, t: usize| frames.data()[(c * bins + k) * t_len + t];
        for t in 0..t_len {
            for (s, acc_s) in acc.iter_mut().enumerate() {
                let re: Vec<f32> = (0..bins).map(|k| at(s, k, t)).collect();
                let im: Vec<f32> = (0..bins).map(|k| at(streams + s, k, t)).collect();
                let y = self.frame_synthesis(&re, &im);
                for (a, v) in acc_s[t * hop..t * hop + win].iter_mut().zip(&y) {
                    *a += *v as f32;
                }
            }
            for (n, (&wa, &ws)) in norm[t * hop..t * hop + win]
                .iter_mut()
                .zip(self.cfg.window.iter().zip(&self.cfg.synthesis_window))
            {
                *n += wa * ws;
            }
        }
        let skip = self.cfg.warmup_chunks() * hop;
        let mut out = vec![0.0; streams * t_len * hop];
        for s in 0..streams {
            for i in skip..t_len * hop {
                out[s * t_len * hop + i] = acc[s][i] / norm[i];
            }
        }
        Tensor::new(&[streams, t_len * hop], out)
    }
}
