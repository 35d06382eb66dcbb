//! Parameter tensors of the network and the tensor-name schema used by the
//! model container.
//!
//! Names (blocks and mixer repetitions are 1-based):
//!
//! ```text
//! encoder.weight                       [C, 2, 3, 3]
//! encoder.bias                         [C]
//! film.{gamma,beta}.weight             [C, E]
//! film.{gamma,beta}.bias               [C]
//! compress.down.weight                 [C, C, a]   (out, in, tap)
//! compress.up.weight                   [C, C, a]   (in, out, tap)
//! compress.{down,up}.bias              [C]
//! blocks.b.mixer.m.token.fc1.weight    [Ht, F']
//! blocks.b.mixer.m.token.fc2.weight    [F', Ht]
//! blocks.b.mixer.m.channel.fc1.weight  [Hc, C]
//! blocks.b.mixer.m.channel.fc2.weight  [C, Hc]
//! blocks.b.mixer.m.*.fc*.bias          [rows]
//! blocks.b.lstm.w_x                    [4H, C]  gates packed i, f, g, o
//! blocks.b.lstm.w_h                    [4H, H]
//! blocks.b.lstm.bias                   [4H]
//! blocks.b.lstm.proj.weight            [C, H]
//! blocks.b.lstm.proj.bias              [C]
//! decoder.weight                       [C, 2S, 3, 3]  (in, out, k_f, k_t)
//! decoder.bias                         [2S]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }
}

/// A convolution's weight and bias; layout depends on the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One MLP-Mixer repetition: a frequency-mixing MLP shared over channels and
/// a channel-mixing MLP shared over frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub token_fc1: Dense,
    pub token_fc2: Dense,
    pub channel_fc1: Dense,
    pub channel_fc2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    /// `[4H, C]`, gate blocks in `i, f, g, o` order.
    pub w_x: Tensor,
    /// `[4H, H]`
    pub w_h: Tensor,
    /// `[4H]`
    pub bias: Tensor,
    /// Hidden state back to latent channels.
    pub proj: Dense,
}

impl ConvLstmParams {
    pub fn hidden(&self) -> usize {
        self.w_h.dim(1)
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        ConvLstmParams {
            w_x: Tensor::zeros(&[4 * hidden, channels]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
            proj: Dense::zeros(hidden, channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma: Dense,
    pub beta: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressParams {
    pub down: ConvParams,
    pub up: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub mixers: Vec<MixerParams>,
    pub lstm: ConvLstmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: ConvParams,
    pub film: Option<FilmParams>,
    pub compress: Option<CompressParams>,
    pub blocks: Vec<BlockParams>,
    pub decoder: ConvParams,
}

struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, or zeros when no rng is set.
    fn tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        match &mut self.rng {
            None => Tensor::zeros(shape),
            Some(rng) => {
                let k = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-k..k))
            }
        }
    }

    fn dense(&mut self, inp: usize, out: usize) -> Dense {
        Dense {
            weight: self.tensor(&[out, inp], inp),
            bias: self.tensor(&[out], inp),
        }
    }

    fn conv(&mut self, shape: &[usize], bias: usize, fan_in: usize) -> ConvParams {
        ConvParams {
            weight: self.tensor(shape, fan_in),
            bias: self.tensor(&[bias], fan_in),
        }
    }

    fn build(&mut self, cfg: &ModelConfig) -> ModelParams {
        let (c, h, fb) = (cfg.channels, cfg.hidden, cfg.block_bins());
        let (ht, hc) = (cfg.token_hidden(), cfg.channel_hidden());
        let out = cfg.output_channels();
        let encoder = self.conv(&[c, 2, 3, 3], c, 2 * 9);
        let film = cfg.film.then(|| FilmParams {
            gamma: self.dense(cfg.embed_dim, c),
            beta: self.dense(cfg.embed_dim, c),
        });
        let compress = (cfg.compression > 1).then(|| {
            let a = cfg.compression;
            CompressParams {
                down: self.conv(&[c, c, a], c, c * a),
                up: self.conv(&[c, c, a], c, c * a),
            }
        });
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                mixers: (0..cfg.mixer_reps)
                    .map(|_| MixerParams {
                        token_fc1: self.dense(fb, ht),
                        token_fc2: self.dense(ht, fb),
                        channel_fc1: self.dense(c, hc),
                        channel_fc2: self.dense(hc, c),
                    })
                    .collect(),
                lstm: ConvLstmParams {
                    w_x: self.tensor(&[4 * h, c], h),
                    w_h: self.tensor(&[4 * h, h], h),
                    bias: self.tensor(&[4 * h], h),
                    proj: self.dense(h, c),
                },
            })
            .collect();
        let decoder = self.conv(&[c, out, 3, 3], out, c * 9);
        ModelParams {
            encoder,
            film,
            compress,
            blocks,
            decoder,
        }
    }
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Init { rng: None }.build(cfg))
    }

    /// Deterministic seeded initialization, uniform scaled by fan-in.
    pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Init {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
        .build(cfg))
    }

    /// Visits every tensor with its schema name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("encoder.weight", &self.encoder.weight);
        f("encoder.bias", &self.encoder.bias);
        if let Some(film) = &self.film {
            f("film.gamma.weight", &film.gamma.weight);
            f("film.gamma.bias", &film.gamma.bias);
            f("film.beta.weight", &film.beta.weight);
            f("film.beta.bias", &film.beta.bias);
        }
        if let Some(cp) = &self.compress {
            f("compress.down.weight", &cp.down.weight);
            f("compress.down.bias", &cp.down.bias);
            f("compress.up.weight", &cp.up.weight);
            f("compress.up.bias", &cp.up.bias);
        }
        for (bi, block) in self.blocks.iter().enumerate() {
            let b = bi + 1;
            for (mi, mx) in block.mixers.iter().enumerate() {
                let m = mi + 1;
                for (part, d) in [
                    ("token.fc1", &mx.token_fc1),
                    ("token.fc2", &mx.token_fc2),
                    ("channel.fc1", &mx.channel_fc1),
                    ("channel.fc2", &mx.channel_fc2),
                ] {
                    f(&format!("blocks.{b}.mixer.{m}.{part}.weight"), &d.weight);
                    f(&format!("blocks.{b}.mixer.{m}.{part}.bias"), &d.bias);
                }
            }
            f(&format!("blocks.{b}.lstm.w_x"), &block.lstm.w_x);
            f(&format!("blocks.{b}.lstm.w_h"), &block.lstm.w_h);
            f(&format!("blocks.{b}.lstm.bias"), &block.lstm.bias);
            f(&format!("blocks.{b}.lstm.proj.weight"), &block.lstm.proj.weight);
            f(&format!("blocks.{b}.lstm.proj.bias"), &block.lstm.proj.bias);
        }
        f("decoder.weight", &self.decoder.weight);
        f("decoder.bias", &self.decoder.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("encoder.weight", &mut self.encoder.weight);
        f("encoder.bias", &mut self.encoder.bias);
        if let Some(film) = &mut self.film {
            f("film.gamma.weight", &mut film.gamma.weight);
            f("film.gamma.bias", &mut film.gamma.bias);
            f("film.beta.weight", &mut film.beta.weight);
            f("film.beta.bias", &mut film.beta.bias);
        }
        if let Some(cp) = &mut self.compress {
            f("compress.down.weight", &mut cp.down.weight);
            f("compress.down.bias", &mut cp.down.bias);
            f("compress.up.weight", &mut cp.up.weight);
            f("compress.up.bias", &mut cp.up.bias);
        }
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let b = bi + 1;
            for (mi, mx) in block.mixers.iter_mut().enumerate() {
                let m = mi + 1;
                for (part, d) in [
                    ("token.fc1", &mut mx.token_fc1),
                    ("token.fc2", &mut mx.token_fc2),
                    ("channel.fc1", &mut mx.channel_fc1),
                    ("channel.fc2", &mut mx.channel_fc2),
                ] {
                    f(&format!("blocks.{b}.mixer.{m}.{part}.weight"), &mut d.weight);
                    f(&format!("blocks.{b}.mixer.{m}.{part}.bias"), &mut d.bias);
                }
            }
            f(&format!("blocks.{b}.lstm.w_x"), &mut block.lstm.w_x);
            f(&format!("blocks.{b}.lstm.w_h"), &mut block.lstm.w_h);
            f(&format!("blocks.{b}.lstm.bias"), &mut block.lstm.bias);
            f(&format!("blocks.{b}.lstm.proj.weight"), &mut block.lstm.proj.weight);
            f(&format!("blocks.{b}.lstm.proj.bias"), &mut block.lstm.proj.bias);
        }
        f("decoder.weight", &mut self.decoder.weight);
        f("decoder.bias", &mut self.decoder.bias);
    }

    /// `(name, shape)` for every tensor, in container order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Checks that the structure matches `cfg` tensor for tensor.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg)?.schema();
        let actual = self.schema();
        if expected != actual {
            return Err(Error::Schema(format!(
                "parameter set does not match configuration ({} tensors expected, {} present)",
                expected.len(),
                actual.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }
}
