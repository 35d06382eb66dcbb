//! WAV and raw embedding files.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono PCM audio as f32 samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFile {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Reads a mono 16-bit integer or 32-bit float WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioFile> {
    let path = path.as_ref();
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{}: {} channels, only mono input is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::Input(format!(
                "{}: {bits}-bit {fmt:?} samples; expected 16-bit integer or 32-bit float",
                path.display()
            )))
        }
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{}: samples contain NaN or infinity", path.display())));
    }
    Ok(AudioFile { samples, sample_rate: spec.sample_rate })
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: SampleFormat::Float };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Writes mono 16-bit integer WAV, clipping to full scale.
pub fn write_wav_i16(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads a speaker embedding stored as raw little-endian f32 values.
pub fn read_embedding(path: impl AsRef<Path>, dim: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() != 4 * dim {
        return Err(Error::Format {
            offset: bytes.len().min(4 * dim) as u64,
            msg: format!("embedding file has {} bytes, expected {} f32 values", bytes.len(), dim),
        });
    }
    let e: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    if let Some(i) = e.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("embedding value {i} is not finite")));
    }
    Ok(e)
}

pub fn write_embedding(path: impl AsRef<Path>, embedding: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = embedding.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Every `.wav` file directly inside `dir`, in name order.
pub fn read_wav_dir(dir: impl AsRef<Path>) -> Result<Vec<AudioFile>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths.iter().map(read_wav).collect()
}
