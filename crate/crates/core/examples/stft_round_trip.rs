//! Streams a chirp through analysis and synthesis one hop at a time and
//! reports the reconstruction error once the overlap-add has filled.

use tfmlpnet::dsp::{FrameConfig, Stft};

fn main() -> tfmlpnet::Result<()> {
    let cfg = FrameConfig::default();
    let stft = Stft::new(cfg.clone())?;
    let mut state = stft.new_state(1);
    let signal: Vec<f32> = (0..16_000).map(|n| (n as f32 * n as f32 * 2e-6).sin() * 0.5).collect();

    let mut out = Vec::with_capacity(signal.len());
    for chunk in signal.chunks_exact(cfg.hop_len) {
        let frame = stft.stft_step(chunk, &mut state)?;
        out.extend_from_slice(stft.istft_step(&frame, &mut state)?.data());
    }

    let delay = cfg.sample_delay();
    let skip = cfg.warmup_chunks() * cfg.hop_len;
    let (mut err, mut energy) = (0.0f64, 0.0f64);
    for n in skip..out.len() {
        let d = f64::from(out[n]) - f64::from(signal[n - delay]);
        err += d * d;
        energy += f64::from(signal[n - delay]).powi(2);
    }
    println!("{} bins, delay {delay} samples, warmup {} chunks", cfg.bins(), cfg.warmup_chunks());
    println!("relative RMS error {:.3e}", (err / energy).sqrt());
    Ok(())
}
