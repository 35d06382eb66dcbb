use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use tfmlpnet::engine::{profile, StreamSession, DEFAULT_WARMUP_CHUNKS};
use tfmlpnet::io::{
    estimated_size, load_model, read_embedding, read_info, read_wav, read_wav_dir, save_model, write_wav,
};
use tfmlpnet::model::{Model, ModelConfig};
use tfmlpnet::quant::{apply_plan, calibrate, PrecisionPlan, PRESETS};
use tfmlpnet::{verify, Error};

/// Streaming speech separation and target speaker extraction.
#[derive(Parser)]
#[command(name = "tfmlp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separates a two-speaker mixture into PREFIX1.wav and PREFIX2.wav.
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Extracts the speaker described by a raw little-endian f32 embedding.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Times every pipeline stage over random input.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        /// Embedding for conditioned models; a fixed unit vector otherwise.
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Calibrates a float model on a directory of WAV files and writes the
    /// quantized model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
        #[arg(long)]
        calib: PathBuf,
        /// Embedding for conditioned models; a fixed unit vector otherwise.
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the built-in oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a randomly initialized model.
    InitRandom {
        /// JSON model configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints parameter counts and container sizes of a model file.
    Inspect { model: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version go to stdout and are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Separate { model, input, out_prefix } => {
            let model = open_model(&model)?;
            if model.config().film {
                return Err(Error::Config("this model is conditioned on an embedding; use extract".into()).into());
            }
            let audio = read_input(&model, &input)?;
            let outputs = StreamSession::new(Arc::new(model.clone()))?.separate_aligned(&audio)?;
            for (i, signal) in outputs.iter().enumerate() {
                let path = format!("{out_prefix}{}.wav", i + 1);
                write_wav(&path, signal, model.config().sample_rate).with_context(|| format!("writing {path}"))?;
            }
        }
        Command::Extract { model, input, embedding, out } => {
            let model = open_model(&model)?;
            if !model.config().film {
                return Err(Error::Config("this model takes no embedding; use separate".into()).into());
            }
            let emb = read_embedding(&embedding, model.config().embed_dim)
                .with_context(|| format!("reading {}", embedding.display()))?;
            let audio = read_input(&model, &input)?;
            let rate = model.config().sample_rate;
            let outputs = StreamSession::with_embedding(Arc::new(model), Some(emb))?.separate_aligned(&audio)?;
            write_wav(&out, &outputs[0], rate).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Profile { model, seconds, embedding, json, seed } => {
            let model = open_model(&model)?;
            let emb = embedding_for(&model, embedding.as_deref())?;
            let mut session = StreamSession::with_embedding(Arc::new(model), emb)?;
            let report = profile(&mut session, seconds, DEFAULT_WARMUP_CHUNKS, seed)?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                println!("{report}");
            }
        }
        Command::Quantize { model, preset, calib, embedding, out } => {
            let model = open_model(&model)?;
            let emb = embedding_for(&model, embedding.as_deref())?;
            let files = read_wav_dir(&calib).with_context(|| format!("reading {}", calib.display()))?;
            if files.is_empty() {
                return Err(Error::Config(format!("{} holds no WAV files", calib.display())).into());
            }
            let rate = model.config().sample_rate;
            if let Some(f) = files.iter().find(|f| f.sample_rate != rate) {
                return Err(Error::Input(format!("calibration audio at {} Hz, model expects {rate} Hz", f.sample_rate)).into());
            }
            let audio: Vec<Vec<f32>> = files.into_iter().map(|f| f.samples).collect();
            let plan = PrecisionPlan::preset(&preset, model.config())?;
            let plan = calibrate(&model, &audio, emb.as_deref(), plan)?;
            let quantized = apply_plan(&model, plan)?;
            save_model(&quantized, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{preset}: {} bytes", std::fs::metadata(&out)?.len());
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed)?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::InitRandom { config, seed, out } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<ModelConfig>(&text)
                        .map_err(Error::from)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => ModelConfig::default(),
            };
            let model = Model::init_random(cfg, seed)?;
            save_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Inspect { model } => {
            let bytes = std::fs::read(&model).with_context(|| format!("reading {}", model.display()))?;
            let info = read_info(&bytes)?;
            let cfg = &info.doc.config;
            let b = cfg.param_breakdown();
            println!("file           {}", model.display());
            println!("format         v{}", info.version);
            println!("preset         {}", info.doc.preset);
            println!("bytes          {}", info.total_bytes);
            println!("parameters     {}", cfg.param_count());
            for (name, n) in [
                ("encoder", b.encoder),
                ("film", b.film),
                ("compression", b.compression),
                ("mixers", b.mixers),
                ("lstms", b.lstms),
                ("decoder", b.decoder),
            ] {
                println!("  {name:<12} {n}");
            }
            println!("estimated container bytes");
            for preset in PRESETS {
                println!("  {preset:<26} {}", estimated_size(cfg, preset)?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn open_model(path: &Path) -> anyhow::Result<Model> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn read_input(model: &Model, path: &Path) -> anyhow::Result<Vec<f32>> {
    let audio = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    let rate = model.config().sample_rate;
    if audio.sample_rate != rate {
        bail!(Error::Input(format!("{} is {} Hz, model expects {rate} Hz", path.display(), audio.sample_rate)));
    }
    Ok(audio.samples)
}

/// The embedding a conditioned model runs with when none is given: every
/// component equal, unit norm.
fn embedding_for(model: &Model, path: Option<&Path>) -> anyhow::Result<Option<Vec<f32>>> {
    let cfg = model.config();
    match (cfg.film, path) {
        (false, None) => Ok(None),
        (false, Some(_)) => Err(Error::Config("this model takes no embedding".into()).into()),
        (true, Some(p)) => {
            Ok(Some(read_embedding(p, cfg.embed_dim).with_context(|| format!("reading {}", p.display()))?))
        }
        (true, None) => Ok(Some(vec![1.0 / (cfg.embed_dim as f32).sqrt(); cfg.embed_dim])),
    }
}
