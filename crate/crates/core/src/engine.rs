//! Real-time chunk processing: stream sessions, the per-stage profiler and
//! an A/B timing harness for the frequency-axis stages.

use std::fmt::{self, Write as _};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{ConvLstmParams, MixerParams, ModelParams};
use crate::model::reference::{reference_batched_lstm_step, BiLstmFrequencyStage};
use crate::model::{conv_batched_lstm_step, mixer_forward, ForwardListener, LstmState, Model, ModelConfig, Stage, StreamState};
use crate::tensor::Tensor;

/// Chunks excluded from profile statistics by default.
pub const DEFAULT_WARMUP_CHUNKS: usize = 10;

/// One live audio stream through a shared model.
#[derive(Debug, Clone)]
pub struct StreamSession {
    model: Arc<Model>,
    state: StreamState,
    embedding: Option<Vec<f32>>,
}

impl StreamSession {
    /// Session for a blind separation model.
    pub fn new(model: Arc<Model>) -> Result<Self> {
        Self::with_embedding(model, None)
    }

    /// Session conditioned on a speaker embedding (required by FiLM models,
    /// rejected by the others).
    pub fn with_embedding(model: Arc<Model>, embedding: Option<Vec<f32>>) -> Result<Self> {
        let cfg = model.config();
        match (&embedding, cfg.film) {
            (None, true) => return Err(Error::config("target extraction model needs a speaker embedding")),
            (Some(_), false) => return Err(Error::config("speaker embedding given to a model without FiLM")),
            (Some(e), true) if e.len() != cfg.embed_dim => {
                return Err(Error::config(format!(
                    "speaker embedding has {} values, model expects {}",
                    e.len(),
                    cfg.embed_dim
                )))
            }
            (Some(e), true) if e.iter().any(|v| !v.is_finite()) => {
                return Err(Error::Input("speaker embedding contains NaN or infinity".into()))
            }
            _ => {}
        }
        let state = model.new_state();
        Ok(StreamSession { model, state, embedding })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    /// Output streams per chunk.
    pub fn speakers(&self) -> usize {
        self.model.config().speakers
    }

    pub fn chunk_len(&self) -> usize {
        self.model.hop_len()
    }

    pub fn chunks_processed(&self) -> u64 {
        self.state.chunks_processed()
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    /// Back to the state of a fresh session.
    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// One hop of samples in, `[S, hop]` out.
    pub fn push_chunk(&mut self, chunk: &[f32]) -> Result<Tensor> {
        self.push_chunk_observed(chunk, &mut crate::model::NoListener)
    }

    pub fn push_chunk_observed(&mut self, chunk: &[f32], listener: &mut dyn ForwardListener) -> Result<Tensor> {
        let hop = self.chunk_len();
        if chunk.len() != hop {
            return Err(Error::Framing { expected: hop, got: chunk.len() });
        }
        if let Some(i) = chunk.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("sample {i} of the chunk is not finite")));
        }
        self.model
            .forward_chunk_observed(chunk, &mut self.state, self.embedding.as_deref(), listener)
    }

    /// Streams a whole signal (zero-padded to whole hops) and returns
    /// `[S, chunks * hop]`. Continues from the current state.
    pub fn push_signal(&mut self, audio: &[f32]) -> Result<Tensor> {
        let hop = self.chunk_len();
        let s = self.speakers();
        let chunks = audio.len().div_ceil(hop);
        let mut out = vec![0.0f32; s * chunks * hop];
        let mut buf = vec![0.0f32; hop];
        for k in 0..chunks {
            let piece = &audio[k * hop..((k + 1) * hop).min(audio.len())];
            buf.fill(0.0);
            buf[..piece.len()].copy_from_slice(piece);
            let y = self.push_chunk(&buf)?;
            for sp in 0..s {
                out[sp * chunks * hop + k * hop..][..hop].copy_from_slice(&y.data()[sp * hop..(sp + 1) * hop]);
            }
        }
        Tensor::new(&[s, chunks * hop], out)
    }

    /// Streams `audio` from a fresh state, flushes the pipeline delay with
    /// zeros and returns one signal per speaker, time-aligned with the input
    /// and of the same length.
    pub fn separate_aligned(&mut self, audio: &[f32]) -> Result<Vec<Vec<f32>>> {
        self.reset();
        let delay = self.model.sample_delay();
        let mut padded = audio.to_vec();
        padded.resize(audio.len() + delay, 0.0);
        let y = self.push_signal(&padded)?;
        self.reset();
        let row = y.dim(1);
        Ok((0..self.speakers()).map(|sp| y.data()[sp * row + delay..sp * row + delay + audio.len()].to_vec()).collect())
    }
}

/// Summary of a set of durations, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl TimingStats {
    /// Nearest-rank percentiles. Empty input gives zeros.
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return TimingStats { mean_ms: 0.0, p50_ms: 0.0, p95_ms: 0.0 };
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        TimingStats {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: String,
    #[serde(flatten)]
    pub stats: TimingStats,
}

/// Per-stage wall time of streaming inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub preset: String,
    pub chunks: usize,
    pub warmup_chunks: usize,
    /// Audio duration of one chunk.
    pub chunk_ms: f64,
    /// In pipeline order.
    pub stages: Vec<StageProfile>,
    pub total: TimingStats,
    /// Mean per-chunk sum over stages.
    pub stage_sum_ms: f64,
    /// Mean per-chunk time spent outside the stages.
    pub overhead_ms: f64,
    /// Mean total time over chunk duration.
    pub rtf: f64,
}

impl ProfileReport {
    pub fn stage(&self, name: &str) -> Option<&TimingStats> {
        self.stages.iter().find(|s| s.stage == name).map(|s| &s.stats)
    }

    /// Summed mean time of all stages whose name ends with `suffix`.
    pub fn stage_group_ms(&self, suffix: &str) -> f64 {
        self.stages.iter().filter(|s| s.stage.ends_with(suffix)).map(|s| s.stats.mean_ms).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(s, "preset         {}", self.preset);
        let _ = writeln!(s, "chunks         {} (+{} warmup)", self.chunks, self.warmup_chunks);
        let _ = writeln!(s, "chunk_ms       {:.3}", self.chunk_ms);
        let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10}", "stage", "mean_ms", "p50_ms", "p95_ms");
        for st in &self.stages {
            let t = &st.stats;
            let _ = writeln!(s, "{:<14} {:>10.4} {:>10.4} {:>10.4}", st.stage, t.mean_ms, t.p50_ms, t.p95_ms);
        }
        let t = &self.total;
        let _ = writeln!(s, "{:<14} {:>10.4} {:>10.4} {:>10.4}", "total", t.mean_ms, t.p50_ms, t.p95_ms);
        let _ = writeln!(s, "stage_sum_ms   {:.4}", self.stage_sum_ms);
        let _ = writeln!(s, "overhead_ms    {:.4}", self.overhead_ms);
        let _ = write!(s, "rtf            {:.4}", self.rtf);
        f.write_str(&s)
    }
}

/// Records the duration of every stage of one forward pass.
#[derive(Debug, Default)]
struct StageTimer {
    open: Option<(Stage, Instant)>,
    done: Vec<(Stage, f64)>,
}

impl ForwardListener for StageTimer {
    fn stage_start(&mut self, stage: Stage) {
        self.open = Some((stage, Instant::now()));
    }

    fn stage_end(&mut self, stage: Stage) {
        let end = Instant::now();
        if let Some((s, start)) = self.open.take() {
            debug_assert_eq!(s, stage);
            self.done.push((stage, (end - start).as_secs_f64() * 1e3));
        }
    }
}

/// Stage list of the forward pass for `cfg`, in pipeline order.
pub fn pipeline_stages(cfg: &ModelConfig) -> Vec<Stage> {
    let mut v = vec![Stage::Stft, Stage::Encoder];
    if cfg.film {
        v.push(Stage::Film);
    }
    if cfg.compression > 1 {
        v.push(Stage::Compress);
    }
    for b in 1..=cfg.blocks {
        v.push(Stage::Mixer(b));
        v.push(Stage::Lstm(b));
    }
    if cfg.compression > 1 {
        v.push(Stage::Decompress);
    }
    v.push(Stage::Decoder);
    v.push(Stage::Istft);
    v
}

/// Times `seconds` of seeded noise through `session` after `warmup` chunks.
/// The session is reset before and after.
pub fn profile(session: &mut StreamSession, seconds: f64, warmup: usize, seed: u64) -> Result<ProfileReport> {
    if !(seconds >= 1.0) || !seconds.is_finite() {
        return Err(Error::config("profiling needs at least one second of audio"));
    }
    if warmup < DEFAULT_WARMUP_CHUNKS {
        return Err(Error::config(format!("profiling needs at least {DEFAULT_WARMUP_CHUNKS} warmup chunks")));
    }
    let model = session.model().clone();
    let cfg = model.config();
    let hop = cfg.hop_len;
    let chunks = (seconds * f64::from(cfg.sample_rate) / hop as f64).ceil() as usize;
    let stages = pipeline_stages(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chunk = vec![0.0f32; hop];
    let mut per_stage = vec![Vec::with_capacity(chunks); stages.len()];
    let mut totals = Vec::with_capacity(chunks);
    let mut sums = Vec::with_capacity(chunks);
    session.reset();
    for k in 0..warmup + chunks {
        chunk.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        let mut timer = StageTimer::default();
        let start = Instant::now();
        session.push_chunk_observed(&chunk, &mut timer)?;
        let total = start.elapsed().as_secs_f64() * 1e3;
        if k < warmup {
            continue;
        }
        if timer.done.len() != stages.len() || timer.done.iter().zip(&stages).any(|((a, _), b)| a != b) {
            return Err(Error::Verification("forward pass stages differ from the pipeline stage list".into()));
        }
        for (i, (_, ms)) in timer.done.iter().enumerate() {
            per_stage[i].push(*ms);
        }
        sums.push(timer.done.iter().map(|(_, ms)| ms).sum::<f64>());
        totals.push(total);
    }
    session.reset();
    let total = TimingStats::from_samples(&totals);
    let stage_sum_ms = sums.iter().sum::<f64>() / sums.len() as f64;
    let chunk_ms = hop as f64 * 1e3 / f64::from(cfg.sample_rate);
    Ok(ProfileReport {
        preset: model.plan().preset_name().to_string(),
        chunks,
        warmup_chunks: warmup,
        chunk_ms,
        stages: stages
            .iter()
            .zip(&per_stage)
            .map(|(s, v)| StageProfile { stage: s.to_string(), stats: TimingStats::from_samples(v) })
            .collect(),
        total,
        stage_sum_ms,
        overhead_ms: total.mean_ms - stage_sum_ms,
        rtf: total.mean_ms / chunk_ms,
    })
}

/// Timings of two implementations measured on the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbComparison {
    pub candidate: String,
    pub baseline: String,
    pub chunks: usize,
    pub candidate_stats: TimingStats,
    pub baseline_stats: TimingStats,
    /// Baseline median over candidate median.
    pub speedup: f64,
}

impl fmt::Display for AbComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} p50 {:.4} ms vs {} p50 {:.4} ms over {} chunks: {:.2}x",
            self.candidate, self.candidate_stats.p50_ms, self.baseline, self.baseline_stats.p50_ms, self.chunks, self.speedup
        )
    }
}

fn time_ms(f: impl FnOnce() -> Result<Tensor>) -> Result<(f64, Tensor)> {
    let start = Instant::now();
    let y = f()?;
    Ok((start.elapsed().as_secs_f64() * 1e3, y))
}

fn ab_run(
    names: (&str, &str),
    chunks: usize,
    input: impl Fn(usize) -> Tensor,
    mut a: impl FnMut(&Tensor) -> Result<Tensor>,
    mut b: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<AbComparison> {
    if chunks == 0 {
        return Err(Error::config("A/B comparison needs at least one chunk"));
    }
    let (mut ta, mut tb) = (Vec::with_capacity(chunks), Vec::with_capacity(chunks));
    let mut sink = 0.0f32;
    for k in 0..chunks {
        let x = input(k);
        // alternate the order so drift affects both sides alike
        let ((da, ya), (db, yb)) = if k % 2 == 0 {
            let ra = time_ms(|| a(&x))?;
            (ra, time_ms(|| b(&x))?)
        } else {
            let rb = time_ms(|| b(&x))?;
            (time_ms(|| a(&x))?, rb)
        };
        sink += ya.data()[0] + yb.data()[0];
        ta.push(da);
        tb.push(db);
    }
    std::hint::black_box(sink);
    let (sa, sb) = (TimingStats::from_samples(&ta), TimingStats::from_samples(&tb));
    Ok(AbComparison {
        candidate: names.0.to_string(),
        baseline: names.1.to_string(),
        chunks,
        candidate_stats: sa,
        baseline_stats: sb,
        speedup: sb.p50_ms / sa.p50_ms.max(1e-12),
    })
}

fn random_frame(rng: &mut ChaCha8Rng, c: usize, f: usize) -> Tensor {
    Tensor::from_fn(&[c, f], |_| rng.gen_range(-1.0..1.0))
}

fn first_block(cfg: &ModelConfig, seed: u64) -> Result<(Vec<MixerParams>, ConvLstmParams)> {
    let one = ModelConfig { blocks: 1, ..cfg.clone() };
    let p = ModelParams::init_random(&one, seed)?;
    let b = p.blocks.into_iter().next().ok_or_else(|| Error::config("config has no blocks"))?;
    Ok((b.mixers, b.lstm))
}

/// One block's mixer stage against a bidirectional per-bin LSTM frequency
/// stage of matched parameter count, on the same random latent frames.
pub fn compare_frequency_stages(cfg: &ModelConfig, chunks: usize, seed: u64) -> Result<AbComparison> {
    cfg.validate()?;
    let (mixers, _) = first_block(cfg, seed)?;
    let bilstm = BiLstmFrequencyStage::init_random(cfg.channels, BiLstmFrequencyStage::matched_hidden(cfg), seed);
    let (c, f) = (cfg.channels, cfg.block_bins());
    let frames: Vec<Tensor> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        (0..chunks.min(64)).map(|_| random_frame(&mut rng, c, f)).collect()
    };
    ab_run(
        ("mixer", "bilstm"),
        chunks,
        |k| frames[k % frames.len()].clone(),
        |x| mixer_forward(x, &mixers),
        |x| bilstm.forward(x),
    )
}

/// The conv-batched LSTM step against the per-bin reference loop, both
/// advancing their own state over the same inputs.
pub fn compare_lstm_kernels(cfg: &ModelConfig, chunks: usize, seed: u64) -> Result<AbComparison> {
    cfg.validate()?;
    let (_, lstm) = first_block(cfg, seed)?;
    let (c, f) = (cfg.channels, cfg.block_bins());
    let frames: Vec<Tensor> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x157);
        (0..chunks.min(64)).map(|_| random_frame(&mut rng, c, f)).collect()
    };
    let mut sa = LstmState::zeros(cfg.hidden, f);
    let mut sb = LstmState::zeros(cfg.hidden, f);
    ab_run(
        ("conv-batched", "per-bin"),
        chunks,
        |k| frames[k % frames.len()].clone(),
        |x| conv_batched_lstm_step(x, &lstm, &mut sa),
        |x| {
            let (y, next) = reference_batched_lstm_step(x, &lstm, &sb)?;
            sb = next;
            Ok(y)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { blocks: 2, channels: 8, hidden: 6, mixer_expansion: 1.5, ..Default::default() }
    }

    fn session(cfg: ModelConfig) -> StreamSession {
        StreamSession::new(Arc::new(Model::init_random(cfg, 3).unwrap())).unwrap()
    }

    #[test]
    fn push_chunk_validates_input() {
        let mut s = session(small());
        assert!(matches!(s.push_chunk(&[0.0; 95]), Err(Error::Framing { expected: 96, got: 95 })));
        let mut x = vec![0.0; 96];
        x[7] = f32::NAN;
        assert!(matches!(s.push_chunk(&x), Err(Error::Input(_))));
        x[7] = f32::INFINITY;
        assert!(matches!(s.push_chunk(&x), Err(Error::Input(_))));
        assert_eq!(s.chunks_processed(), 0);
    }

    #[test]
    fn first_chunk_is_silent_warmup() {
        let mut s = session(small());
        let y = s.push_chunk(&[0.0; 96]).unwrap();
        assert_eq!(y.shape(), &[2, 96]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x: Vec<f32> = (0..96).map(|i| (i as f32 * 0.3).sin()).collect();
        s.reset();
        assert!(s.push_chunk(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_chunk_gives_zero_output_on_zero_bias_model() {
        let cfg = small();
        let mut p = ModelParams::init_random(&cfg, 1).unwrap();
        p.visit_mut(&mut |name, t| {
            if name.ends_with("bias") {
                t.data_mut().fill(0.0);
            }
        });
        let mut s = StreamSession::new(Arc::new(Model::new(cfg, p).unwrap())).unwrap();
        for _ in 0..5 {
            assert!(s.push_chunk(&[0.0; 96]).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn session_matches_offline_and_replays() {
        let mut s = session(small());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..96 * 20).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let streamed = s.push_signal(&x).unwrap();
        let offline = s.model().forward_offline(&x, None).unwrap();
        assert!(streamed.max_abs_diff(&offline) < 1e-5);
        assert_eq!(s.chunks_processed(), 20);
        s.reset();
        assert_eq!(s.chunks_processed(), 0);
        assert_eq!(s.push_signal(&x).unwrap(), streamed);
    }

    #[test]
    fn embedding_rules() {
        let cfg = ModelConfig { film: true, speakers: 1, embed_dim: 4, ..small() };
        let m = Arc::new(Model::init_random(cfg, 2).unwrap());
        assert!(matches!(StreamSession::new(m.clone()), Err(Error::Config(_))));
        assert!(matches!(StreamSession::with_embedding(m.clone(), Some(vec![0.0; 3])), Err(Error::Config(_))));
        assert!(matches!(
            StreamSession::with_embedding(m.clone(), Some(vec![f32::NAN; 4])),
            Err(Error::Input(_))
        ));
        let mut s = StreamSession::with_embedding(m, Some(vec![0.5; 4])).unwrap();
        assert_eq!(s.push_chunk(&[0.1; 96]).unwrap().shape(), &[1, 96]);
    }

    #[test]
    fn aligned_output_matches_delayed_stream() {
        let m = Arc::new(Model::init_random(small(), 4).unwrap());
        let mut s = StreamSession::new(m.clone()).unwrap();
        let x: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        let out = s.separate_aligned(&x).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| o.len() == x.len()));
        let streamed = m.process(&x, None).unwrap();
        let (d, row) = (m.sample_delay(), streamed.dim(1));
        for (sp, o) in out.iter().enumerate() {
            // the aligned signal is the stream shifted back by the delay
            assert_eq!(&o[..row - d], &streamed.data()[sp * row + d..(sp + 1) * row]);
        }
        assert_eq!(s.chunks_processed(), 0);
    }

    #[test]
    fn timing_stats_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let t = TimingStats::from_samples(&v);
        assert_eq!((t.mean_ms, t.p50_ms, t.p95_ms), (10.5, 10.0, 19.0));
        assert_eq!(TimingStats::from_samples(&[]).p95_ms, 0.0);
    }

    #[test]
    fn profile_report_structure() {
        for cfg in [small(), ModelConfig { compression: 2, film: true, speakers: 1, embed_dim: 4, ..small() }] {
            let m = Arc::new(Model::init_random(cfg.clone(), 1).unwrap());
            let emb = cfg.film.then(|| vec![0.1; 4]);
            let mut s = StreamSession::with_embedding(m, emb).unwrap();
            let r = profile(&mut s, 1.0, 10, 5).unwrap();
            let names: Vec<String> = pipeline_stages(&cfg).iter().map(|s| s.to_string()).collect();
            let got: Vec<String> = r.stages.iter().map(|s| s.stage.clone()).collect();
            assert_eq!(got, names);
            assert_eq!(r.chunks, 167);
            assert_eq!(r.chunk_ms, 6.0);
            assert!(r.stage_sum_ms <= r.total.mean_ms);
            assert!(r.stages.iter().all(|s| s.stats.mean_ms >= 0.0 && s.stats.p50_ms <= s.stats.p95_ms));
            assert!((r.rtf - r.total.mean_ms / 6.0).abs() < 1e-12);
            let back: ProfileReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
            assert_eq!(back, r);
            let text = r.to_string();
            assert!(text.contains("block2.lstm") && text.contains("rtf"));
            assert_eq!(s.chunks_processed(), 0);
        }
        let mut s = session(small());
        assert!(matches!(profile(&mut s, 0.5, 10, 1), Err(Error::Config(_))));
        assert!(matches!(profile(&mut s, 1.0, 9, 1), Err(Error::Config(_))));
    }

    #[test]
    fn ab_harness_reports_both_sides() {
        let r = compare_lstm_kernels(&small(), 20, 1).unwrap();
        assert_eq!(r.chunks, 20);
        assert!(r.speedup > 0.0 && r.candidate_stats.p50_ms > 0.0);
        let r = compare_frequency_stages(&small(), 20, 1).unwrap();
        assert_eq!((r.candidate.as_str(), r.baseline.as_str()), ("mixer", "bilstm"));
    }
}
