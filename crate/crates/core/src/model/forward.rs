use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::config::ModelConfig;
use super::graph::{
    film_apply_with, freq_compress_with, freq_decompress_with, lstm_step_with, mixer_forward_with, Exec, FloatExec,
    LstmState,
};
use super::params::ModelParams;
use crate::dsp::{Stft, StftState};
use crate::error::{Error, Result, StageExt};
use crate::quant::{PrecisionPlan, QuantizedWeight};
use crate::tensor::{conv2d_causal, conv_transpose2d_causal, ConvSpec, Tensor};

/// A pipeline stage, as reported to a [`ForwardListener`]. Block indices are
/// 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Stft,
    Encoder,
    Film,
    Compress,
    Mixer(usize),
    Lstm(usize),
    Decompress,
    Decoder,
    Istft,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stft => f.write_str("stft"),
            Stage::Encoder => f.write_str("encoder"),
            Stage::Film => f.write_str("film"),
            Stage::Compress => f.write_str("compress"),
            Stage::Mixer(b) => write!(f, "block{b}.mixer"),
            Stage::Lstm(b) => write!(f, "block{b}.lstm"),
            Stage::Decompress => f.write_str("decompress"),
            Stage::Decoder => f.write_str("decoder"),
            Stage::Istft => f.write_str("istft"),
        }
    }
}

impl Stage {
    fn label(self) -> &'static str {
        match self {
            Stage::Stft => "stft",
            Stage::Encoder => "encoder",
            Stage::Film => "film",
            Stage::Compress => "compress",
            Stage::Mixer(_) => "mixer",
            Stage::Lstm(_) => "lstm",
            Stage::Decompress => "decompress",
            Stage::Decoder => "decoder",
            Stage::Istft => "istft",
        }
    }
}

/// Hooks around every stage of a forward pass.
pub trait ForwardListener {
    fn stage_start(&mut self, _stage: Stage) {}
    fn stage_end(&mut self, _stage: Stage) {}
}

/// Listener that ignores every event.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoListener;

impl ForwardListener for NoListener {}

/// Everything a stream carries from one chunk to the next.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub(crate) stft: StftState,
    /// `[2, F, 2]` previous encoder input frames.
    pub(crate) encoder_history: Tensor,
    /// `[C, F, 2]` previous decoder input frames.
    pub(crate) decoder_history: Tensor,
    pub(crate) lstm: Vec<LstmState>,
    pub(crate) chunks: u64,
}

impl StreamState {
    pub fn new(model: &Model) -> Self {
        let cfg = &model.config;
        StreamState {
            stft: model.stft.new_state(cfg.speakers),
            encoder_history: Tensor::zeros(&[2, cfg.freq_bins, 2]),
            decoder_history: Tensor::zeros(&[cfg.channels, cfg.freq_bins, 2]),
            lstm: (0..cfg.blocks).map(|_| LstmState::zeros(cfg.hidden, cfg.block_bins())).collect(),
            chunks: 0,
        }
    }

    /// Zeroes every buffer, as if the stream had just started.
    pub fn reset(&mut self) {
        self.stft.reset();
        self.encoder_history.data_mut().fill(0.0);
        self.decoder_history.data_mut().fill(0.0);
        for s in &mut self.lstm {
            s.h.data_mut().fill(0.0);
            s.c.data_mut().fill(0.0);
        }
        self.chunks = 0;
    }

    pub fn chunks_processed(&self) -> u64 {
        self.chunks
    }

    pub fn lstm_states(&self) -> &[LstmState] {
        &self.lstm
    }
}

/// A model ready for inference: configuration, weights and the kernels of
/// its precision plan.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    stft: Stft,
    plan: PrecisionPlan,
    exec: Arc<dyn Exec + Send + Sync>,
    /// Integer weights by tensor name; `params` holds their dequantized values.
    quantized: Arc<BTreeMap<String, QuantizedWeight>>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("preset", &self.plan.preset_name())
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Float model. Fails if `params` does not match `config`.
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        if !params.is_finite() {
            return Err(Error::Numeric("model weights contain NaN or infinity".into()));
        }
        let stft = Stft::new(config.frame_config()?)?;
        let plan = PrecisionPlan::float(&config);
        Ok(Model { config, params, stft, plan, exec: Arc::new(FloatExec), quantized: Arc::default() })
    }

    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init_random(&config, seed)?;
        Self::new(config, params)
    }

    pub(crate) fn with_exec(
        mut self,
        plan: PrecisionPlan,
        exec: Arc<dyn Exec + Send + Sync>,
        quantized: BTreeMap<String, QuantizedWeight>,
    ) -> Self {
        self.plan = plan;
        self.exec = exec;
        self.quantized = Arc::new(quantized);
        self
    }

    /// Integer weights of the precision plan, by tensor name.
    pub fn quantized_weights(&self) -> &BTreeMap<String, QuantizedWeight> {
        &self.quantized
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn plan(&self) -> &PrecisionPlan {
        &self.plan
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn new_state(&self) -> StreamState {
        StreamState::new(self)
    }

    pub fn hop_len(&self) -> usize {
        self.config.hop_len
    }

    /// Input-to-output delay of the framing, in samples.
    pub fn sample_delay(&self) -> usize {
        self.stft.config().sample_delay()
    }

    fn check_embedding(&self, embedding: Option<&[f32]>) -> Result<()> {
        match (self.config.film, embedding) {
            (true, None) => Err(Error::config("target extraction model needs a speaker embedding")),
            (false, Some(_)) => Err(Error::config("speaker embedding given to a model without FiLM")),
            (true, Some(e)) if e.len() != self.config.embed_dim => Err(Error::config(format!(
                "speaker embedding has {} values, model expects {}",
                e.len(),
                self.config.embed_dim
            ))),
            _ => Ok(()),
        }
    }

    /// One hop of audio in, one hop per output speaker out (`[S, hop]`).
    pub fn forward_chunk(&self, chunk: &[f32], state: &mut StreamState, embedding: Option<&[f32]>) -> Result<Tensor> {
        self.forward_chunk_observed(chunk, state, embedding, &mut NoListener)
    }

    pub fn forward_chunk_observed(
        &self,
        chunk: &[f32],
        state: &mut StreamState,
        embedding: Option<&[f32]>,
        listener: &mut dyn ForwardListener,
    ) -> Result<Tensor> {
        self.forward_chunk_exec(&*self.exec, chunk, state, embedding, listener)
    }

    pub(crate) fn forward_chunk_exec(
        &self,
        exec: &dyn Exec,
        chunk: &[f32],
        state: &mut StreamState,
        embedding: Option<&[f32]>,
        listener: &mut dyn ForwardListener,
    ) -> Result<Tensor> {
        self.check_embedding(embedding)?;
        listener.stage_start(Stage::Stft);
        let frame = self.stft.stft_step(chunk, &mut state.stft).stage("stft")?;
        listener.stage_end(Stage::Stft);

        listener.stage_start(Stage::Encoder);
        let latent = exec
            .encoder(&frame, &self.params.encoder, &mut state.encoder_history)
            .stage("encoder")?;
        listener.stage_end(Stage::Encoder);

        let latent = self.core_frame(exec, latent, &mut state.lstm, embedding, listener)?;

        listener.stage_start(Stage::Decoder);
        let out = exec
            .decoder(&latent, &self.params.decoder, &mut state.decoder_history)
            .stage("decoder")?;
        listener.stage_end(Stage::Decoder);

        listener.stage_start(Stage::Istft);
        let audio = self.stft.istft_step(&out, &mut state.stft).stage("istft")?;
        listener.stage_end(Stage::Istft);
        state.chunks += 1;
        Ok(audio)
    }

    /// FiLM, compression, the MLPNet blocks and decompression on one `[C, F]`
    /// latent frame.
    fn core_frame(
        &self,
        exec: &dyn Exec,
        mut latent: Tensor,
        lstm: &mut [LstmState],
        embedding: Option<&[f32]>,
        listener: &mut dyn ForwardListener,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let timed = |listener: &mut dyn ForwardListener, stage: Stage, f: &mut dyn FnMut() -> Result<Tensor>| {
            listener.stage_start(stage);
            let r = f().stage(stage.label());
            listener.stage_end(stage);
            r
        };
        if let Some(e) = embedding {
            latent = timed(listener, Stage::Film, &mut || {
                film_apply_with(exec, &latent, e, self.params.film.as_ref())
            })?;
        }
        if let Some(cp) = &self.params.compress {
            latent = timed(listener, Stage::Compress, &mut || {
                freq_compress_with(exec, &latent, cfg.compression, cp)
            })?;
        }
        for (i, (block, st)) in self.params.blocks.iter().zip(lstm.iter_mut()).enumerate() {
            let b = i + 1;
            latent = timed(listener, Stage::Mixer(b), &mut || {
                mixer_forward_with(exec, b, &latent, &block.mixers)
            })?;
            latent = timed(listener, Stage::Lstm(b), &mut || lstm_step_with(exec, b, &latent, &block.lstm, st))?;
        }
        if let Some(cp) = &self.params.compress {
            latent = timed(listener, Stage::Decompress, &mut || {
                freq_decompress_with(exec, &latent, cfg.compression, cfg.freq_bins, cp)
            })?;
        }
        Ok(latent)
    }

    /// Streams `audio` chunk by chunk through a fresh state. The input is
    /// zero-padded to whole hops; output is `[S, chunks * hop]` and lags the
    /// input by [`Model::sample_delay`] samples.
    pub fn process(&self, audio: &[f32], embedding: Option<&[f32]>) -> Result<Tensor> {
        let hop = self.config.hop_len;
        let chunks = audio.len().div_ceil(hop);
        let mut state = self.new_state();
        let s = self.config.speakers;
        let mut out = vec![0.0f32; s * chunks * hop];
        let mut buf = vec![0.0f32; hop];
        for k in 0..chunks {
            buf.fill(0.0);
            let end = ((k + 1) * hop).min(audio.len());
            buf[..end - k * hop].copy_from_slice(&audio[k * hop..end]);
            let y = self.forward_chunk(&buf, &mut state, embedding)?;
            for sp in 0..s {
                out[sp * chunks * hop + k * hop..][..hop].copy_from_slice(&y.data()[sp * hop..(sp + 1) * hop]);
            }
        }
        Tensor::new(&[s, chunks * hop], out)
    }

    /// Whole-signal forward pass for float models: the convolutions and the
    /// STFT run over all frames at once, the recurrent blocks frame by frame.
    /// Matches [`Model::process`] on the same input.
    pub fn forward_offline(&self, audio: &[f32], embedding: Option<&[f32]>) -> Result<Tensor> {
        if !self.plan.is_float() {
            return Err(Error::config("offline forward is only defined for the f32 plan"));
        }
        self.check_embedding(embedding)?;
        let cfg = &self.config;
        let (c, f) = (cfg.channels, cfg.freq_bins);
        let spec = self.stft.analyze(audio).stage("stft")?;
        let frames = spec.dim(2);
        let enc = ConvSpec::causal_3x3(2, c);
        let (latent_all, _) = conv2d_causal(
            &spec,
            &enc,
            &self.params.encoder.weight,
            &self.params.encoder.bias,
            &Tensor::zeros(&[2, f, 2]),
        )
        .stage("encoder")?;

        let mut lstm: Vec<LstmState> = (0..cfg.blocks).map(|_| LstmState::zeros(cfg.hidden, cfg.block_bins())).collect();
        let mut core_all = vec![0.0f32; c * f * frames];
        for t in 0..frames {
            let latent = Tensor::from_fn(&[c, f], |i| latent_all.data()[i * frames + t]);
            let y = self.core_frame(&FloatExec, latent, &mut lstm, embedding, &mut NoListener)?;
            for (i, v) in y.data().iter().enumerate() {
                core_all[i * frames + t] = *v;
            }
        }
        let core_all = Tensor::new(&[c, f, frames], core_all)?;
        let dec = ConvSpec::transposed_3x3(c, cfg.output_channels());
        let (out, _) = conv_transpose2d_causal(
            &core_all,
            &dec,
            &self.params.decoder.weight,
            &self.params.decoder.bias,
            &Tensor::zeros(&[c, f, 2]),
        )
        .stage("decoder")?;
        self.stft.synthesize(&out).stage("istft")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig { blocks: 2, channels: 6, hidden: 5, mixer_expansion: 1.0, ..Default::default() }
    }

    fn noise(n: usize, seed: u32) -> Vec<f32> {
        (0..n).map(|i| ((i as f32 * 12.9898 + seed as f32).sin() * 43758.547).fract() - 0.5).collect()
    }

    #[test]
    fn streaming_matches_offline_small() {
        for cfg in [small_cfg(), ModelConfig { compression: 4, ..small_cfg() }] {
            let model = Model::init_random(cfg, 3).unwrap();
            let x = noise(96 * 20, 1);
            let a = model.process(&x, None).unwrap();
            let b = model.forward_offline(&x, None).unwrap();
            assert_eq!(a.shape(), &[2, 96 * 20]);
            assert_eq!(a.shape(), b.shape());
            assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }

    #[test]
    fn tse_needs_embedding() {
        let cfg = ModelConfig { speakers: 1, film: true, embed_dim: 8, ..small_cfg() };
        let model = Model::init_random(cfg, 4).unwrap();
        let mut st = model.new_state();
        let chunk = vec![0.1; 96];
        assert!(matches!(model.forward_chunk(&chunk, &mut st, None), Err(Error::Config(_))));
        assert!(matches!(model.forward_chunk(&chunk, &mut st, Some(&[0.0; 3])), Err(Error::Config(_))));
        let y = model.forward_chunk(&chunk, &mut st, Some(&[0.5; 8])).unwrap();
        assert_eq!(y.shape(), &[1, 96]);

        let x = noise(96 * 8, 2);
        let e: Vec<f32> = noise(8, 3);
        let a = model.process(&x, Some(&e)).unwrap();
        let b = model.forward_offline(&x, Some(&e)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);

        let bss = Model::init_random(small_cfg(), 4).unwrap();
        let mut st = bss.new_state();
        assert!(matches!(bss.forward_chunk(&chunk, &mut st, Some(&[0.5; 8])), Err(Error::Config(_))));
    }

    #[test]
    fn framing_and_numeric_errors_are_attributed() {
        let model = Model::init_random(small_cfg(), 5).unwrap();
        let mut st = model.new_state();
        let e = model.forward_chunk(&[0.0; 95], &mut st, None).unwrap_err();
        assert!(e.to_string().starts_with("stft"), "{e}");
        assert!(matches!(e.root(), Error::Framing { expected: 96, got: 95 }));
        let mut bad = vec![0.0; 96];
        bad[3] = f32::NAN;
        let e = model.forward_chunk(&bad, &mut st, None).unwrap_err();
        assert!(matches!(e.root(), Error::Numeric(_)), "{e}");
    }

    #[test]
    fn reset_restores_fresh_stream() {
        let model = Model::init_random(small_cfg(), 6).unwrap();
        let x = noise(96 * 6, 7);
        let mut st = model.new_state();
        let first: Vec<Tensor> = x.chunks(96).map(|c| model.forward_chunk(c, &mut st, None).unwrap()).collect();
        st.reset();
        assert_eq!(st.chunks_processed(), 0);
        for (c, want) in x.chunks(96).zip(&first) {
            assert_eq!(&model.forward_chunk(c, &mut st, None).unwrap(), want);
        }
    }

    #[test]
    fn listener_sees_every_stage_in_order() {
        #[derive(Default)]
        struct Log(Vec<String>);
        impl ForwardListener for Log {
            fn stage_start(&mut self, s: Stage) {
                self.0.push(format!("+{s}"));
            }
            fn stage_end(&mut self, s: Stage) {
                self.0.push(format!("-{s}"));
            }
        }
        let model = Model::init_random(ModelConfig { compression: 2, ..small_cfg() }, 8).unwrap();
        let mut st = model.new_state();
        let mut log = Log::default();
        model.forward_chunk_observed(&[0.0; 96], &mut st, None, &mut log).unwrap();
        let starts: Vec<&str> = log.0.iter().filter(|s| s.starts_with('+')).map(|s| &s[1..]).collect();
        assert_eq!(
            starts,
            [
                "stft", "encoder", "compress", "block1.mixer", "block1.lstm", "block2.mixer", "block2.lstm",
                "decompress", "decoder", "istft"
            ]
        );
        assert_eq!(log.0.len(), 20);
    }
}
