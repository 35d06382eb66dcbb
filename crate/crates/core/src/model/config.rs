use serde::{Deserialize, Serialize};

use crate::dsp::FrameConfig;
use crate::error::{Error, Result};

/// Gate order of the packed LSTM weights: input, forget, cell candidate, output.
pub const GATE_ORDER: &str = "ifgo";

/// Model hyperparameters.
///
/// Every field has a default, so `{}` deserializes to the default two-speaker
/// separation model and `{"speakers": 1, "film": true}` to the target-speaker
/// extraction model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// MLPNet blocks.
    pub blocks: usize,
    /// MLP-Mixer repetitions per block.
    pub mixer_reps: usize,
    /// Latent channels.
    pub channels: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    /// STFT bins, `win_len / 2 + 1`.
    pub freq_bins: usize,
    /// 2 for blind separation, 1 for target extraction.
    pub speakers: usize,
    /// Frequency compression factor; 1 disables compression.
    pub compression: usize,
    /// Hidden width of each mixer MLP relative to its input width.
    pub mixer_expansion: f64,
    /// FiLM conditioning on a speaker embedding after the encoder.
    pub film: bool,
    pub embed_dim: usize,
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 6,
            mixer_reps: 2,
            channels: 32,
            hidden: 32,
            freq_bins: 81,
            speakers: 2,
            compression: 1,
            // Lands the default separation model nearest 493K parameters.
            mixer_expansion: 2.36,
            film: false,
            embed_dim: 256,
            sample_rate: 16_000,
            win_len: 160,
            hop_len: 96,
        }
    }
}

/// Parameter counts per architectural component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub film: usize,
    pub compression: usize,
    pub mixers: usize,
    pub lstms: usize,
    pub decoder: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.encoder + self.film + self.compression + self.mixers + self.lstms + self.decoder
    }
}

fn dense(inp: usize, out: usize) -> usize {
    inp * out + out
}

impl ModelConfig {
    /// Target speaker extraction defaults: one output speaker, FiLM enabled.
    pub fn tse() -> Self {
        ModelConfig {
            speakers: 1,
            film: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("mixer_reps", self.mixer_reps),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("freq_bins", self.freq_bins),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(1..=2).contains(&self.speakers) {
            return Err(Error::config("speakers must be 1 or 2"));
        }
        if ![1, 2, 4, 6].contains(&self.compression) {
            return Err(Error::config("compression must be one of 1, 2, 4, 6"));
        }
        if !(self.mixer_expansion.is_finite() && self.mixer_expansion > 0.0) {
            return Err(Error::config("mixer_expansion must be positive"));
        }
        if self.freq_bins != self.win_len / 2 + 1 {
            return Err(Error::config(format!(
                "freq_bins {} does not match win_len {} (expected {})",
                self.freq_bins,
                self.win_len,
                self.win_len / 2 + 1
            )));
        }
        self.frame_config().map(|_| ())
    }

    pub fn frame_config(&self) -> Result<FrameConfig> {
        FrameConfig::new(self.sample_rate, self.win_len, self.hop_len)
    }

    /// Bins seen by the MLPNet blocks.
    pub fn block_bins(&self) -> usize {
        self.freq_bins.div_ceil(self.compression)
    }

    pub fn token_hidden(&self) -> usize {
        ((self.mixer_expansion * self.block_bins() as f64).round() as usize).max(1)
    }

    pub fn channel_hidden(&self) -> usize {
        ((self.mixer_expansion * self.channels as f64).round() as usize).max(1)
    }

    pub fn output_channels(&self) -> usize {
        2 * self.speakers
    }

    /// Closed-form parameter count per component.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let (c, h, fb) = (self.channels, self.hidden, self.block_bins());
        let (ht, hc) = (self.token_hidden(), self.channel_hidden());
        let mixer = dense(fb, ht) + dense(ht, fb) + dense(c, hc) + dense(hc, c);
        let lstm = 4 * h * c + 4 * h * h + 4 * h + dense(h, c);
        ParamBreakdown {
            encoder: 2 * c * 9 + c,
            film: if self.film { 2 * dense(self.embed_dim, c) } else { 0 },
            compression: if self.compression > 1 {
                2 * (c * c * self.compression + c)
            } else {
                0
            },
            mixers: self.blocks * self.mixer_reps * mixer,
            lstms: self.blocks * lstm,
            decoder: c * self.output_channels() * 9 + self.output_channels(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_breakdown().total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tse().validate().unwrap();
        let parsed: ModelConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, ModelConfig::default());
        let tse: ModelConfig = serde_json::from_str(r#"{"speakers": 1, "film": true}"#).unwrap();
        assert_eq!(tse, ModelConfig::tse());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ModelConfig { blocks: 0, ..Default::default() },
            ModelConfig { speakers: 3, ..Default::default() },
            ModelConfig { compression: 3, ..Default::default() },
            ModelConfig { freq_bins: 80, ..Default::default() },
            ModelConfig { mixer_expansion: 0.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn compressed_bins() {
        for (alpha, bins) in [(1, 81), (2, 41), (4, 21), (6, 14)] {
            let cfg = ModelConfig { compression: alpha, ..Default::default() };
            assert_eq!(cfg.block_bins(), bins);
        }
    }

    #[test]
    fn default_count_by_hand() {
        // hidden widths: round(2.36 * 81) = 191, round(2.36 * 32) = 76
        let token = 81 * 191 + 191 + 191 * 81 + 81;
        let channel = 32 * 76 + 76 + 76 * 32 + 32;
        let lstm = 128 * 32 + 128 * 32 + 128 + 32 * 32 + 32;
        let total = 6 * (2 * (token + channel) + lstm) + (2 * 32 * 9 + 32) + (32 * 4 * 9 + 4);
        assert_eq!(ModelConfig::default().param_count(), total);
        assert_eq!(total, 492_252);
    }

    #[test]
    fn tse_delta_is_film_plus_decoder() {
        let bss = ModelConfig::default().param_count();
        let tse = ModelConfig::tse().param_count();
        let film = 2 * (256 * 32 + 32);
        let decoder_delta = 32 * 2 * 9 + 2;
        assert_eq!(tse, bss + film - decoder_delta);
    }
}
