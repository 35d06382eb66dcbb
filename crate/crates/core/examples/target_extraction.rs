//! Target speaker extraction: the model is conditioned on a speaker
//! embedding and returns a single output stream.

use std::sync::Arc;

use tfmlpnet::engine::StreamSession;
use tfmlpnet::model::{Model, ModelConfig};

fn main() -> tfmlpnet::Result<()> {
    let cfg = ModelConfig::tse();
    println!("extraction model: {} parameters, embedding dim {}", cfg.param_count(), cfg.embed_dim);
    let model = Arc::new(Model::init_random(cfg.clone(), 2)?);
    let mix: Vec<f32> = (0..4_800).map(|n| (n as f32 * 0.05).sin() * 0.4).collect();

    for (label, scale) in [("speaker A", 1.0f32), ("speaker B", -1.0)] {
        let embedding: Vec<f32> =
            (0..cfg.embed_dim).map(|i| scale * ((i as f32 * 0.37).sin()) / (cfg.embed_dim as f32).sqrt()).collect();
        let mut session = StreamSession::with_embedding(model.clone(), Some(embedding))?;
        let out = session.separate_aligned(&mix)?;
        let rms = (out[0].iter().map(|v| v * v).sum::<f32>() / out[0].len() as f32).sqrt();
        println!("{label}: {} samples, RMS {rms:.4}", out[0].len());
    }
    Ok(())
}
