//! Separates a synthetic two-tone mixture chunk by chunk with a random
//! model and checks the stream against the offline pass.

use std::sync::Arc;

use tfmlpnet::engine::StreamSession;
use tfmlpnet::model::{Model, ModelConfig};

fn main() -> tfmlpnet::Result<()> {
    let model = Arc::new(Model::init_random(ModelConfig::default(), 7)?);
    let mix: Vec<f32> = (0..8_000)
        .map(|n| {
            let t = n as f32 / 16_000.0;
            0.3 * (2.0 * std::f32::consts::PI * 220.0 * t).sin() + 0.2 * (2.0 * std::f32::consts::PI * 1_250.0 * t).sin()
        })
        .collect();

    let mut session = StreamSession::new(model.clone())?;
    let hop = session.chunk_len();
    let mut streamed = vec![Vec::new(); session.speakers()];
    for chunk in mix.chunks_exact(hop) {
        let out = session.push_chunk(chunk)?;
        for (s, buf) in streamed.iter_mut().enumerate() {
            buf.extend_from_slice(&out.data()[s * hop..(s + 1) * hop]);
        }
    }

    let usable = mix.len() / hop * hop;
    let offline = model.forward_offline(&mix[..usable], None)?;
    let diff = streamed
        .iter()
        .flatten()
        .zip(offline.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("{} chunks of {hop} samples, {} outputs", session.chunks_processed(), streamed.len());
    println!("stream vs offline max difference {diff:.3e}");

    let aligned = session.separate_aligned(&mix)?;
    println!("delay-compensated outputs: {} samples each", aligned[0].len());
    Ok(())
}
