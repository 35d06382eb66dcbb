//! Per-stage timing of streaming inference, followed by the two A/B
//! comparisons: mixer vs BiLSTM frequency stage and conv-batched vs
//! per-bin LSTM.

use std::sync::Arc;

use tfmlpnet::engine::{compare_frequency_stages, compare_lstm_kernels, profile, StreamSession, DEFAULT_WARMUP_CHUNKS};
use tfmlpnet::model::{Model, ModelConfig};

fn main() -> tfmlpnet::Result<()> {
    let cfg = ModelConfig::default();
    let mut session = StreamSession::new(Arc::new(Model::init_random(cfg.clone(), 5)?))?;
    let report = profile(&mut session, 2.0, DEFAULT_WARMUP_CHUNKS, 0)?;
    println!("{report}");
    println!("{}", compare_frequency_stages(&cfg, 200, 0)?);
    println!("{}", compare_lstm_kernels(&cfg, 200, 0)?);
    Ok(())
}
