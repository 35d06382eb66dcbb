//! Command-line behavior: exit codes, output files and report formats.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use tfmlpnet::io::{read_wav, save_model, write_wav, write_wav_i16};
use tfmlpnet::model::{Model, ModelConfig, ModelParams};

fn tfmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfmlp")).args(args).output().expect("spawn tfmlp")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn small_config() -> ModelConfig {
    ModelConfig { blocks: 2, channels: 8, hidden: 8, mixer_expansion: 1.0, ..Default::default() }
}

fn save_small(dir: &TempDir, name: &str, zero_bias: bool) -> String {
    let model = Model::init_random(small_config(), 9).unwrap();
    let mut params: ModelParams = model.params().clone();
    if zero_bias {
        params.visit_mut(&mut |name, t| {
            if name.ends_with("bias") {
                t.data_mut().fill(0.0);
            }
        });
    }
    let p = path(dir, name);
    save_model(&Model::new(small_config(), params).unwrap(), &p).unwrap();
    p
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&tfmlp(&[])), 1);
    assert_eq!(code(&tfmlp(&["separate", "--model", "m.tfmlp"])), 1);
    assert_eq!(code(&tfmlp(&["quantize", "--model", "m", "--preset", "int4", "--calib", "c", "--out", "o"])), 1);
    assert_eq!(code(&tfmlp(&["nonsense"])), 1);
    let help = tfmlp(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["separate", "extract", "profile", "quantize", "verify", "init-random", "inspect"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn bad_files_exit_2() {
    let dir = TempDir::new().unwrap();
    let junk = path(&dir, "junk.tfmlp");
    std::fs::write(&junk, b"NOTAMODEL and then some").unwrap();
    let out = tfmlp(&["inspect", &junk]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 0"));

    assert_eq!(code(&tfmlp(&["inspect", &path(&dir, "missing.tfmlp")])), 2);

    let model = save_small(&dir, "m.tfmlp", false);
    let stereo = path(&dir, "stereo.wav");
    let spec = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..200 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    assert_eq!(code(&tfmlp(&["separate", "--model", &model, "--in", &stereo, "--out-prefix", &path(&dir, "s")])), 2);

    let wrong_rate = path(&dir, "8k.wav");
    write_wav_i16(&wrong_rate, &[0.0; 800], 8_000).unwrap();
    assert_eq!(code(&tfmlp(&["separate", "--model", &model, "--in", &wrong_rate, "--out-prefix", &path(&dir, "s")])), 2);
}

#[test]
fn configuration_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "cfg.json");
    std::fs::write(&cfg, r#"{"compression": 3}"#).unwrap();
    assert_eq!(code(&tfmlp(&["init-random", "--config", &cfg, "--out", &path(&dir, "m.tfmlp")])), 1);

    // an extraction model cannot separate, and the reverse
    let model = save_small(&dir, "m.tfmlp", false);
    let mix = path(&dir, "mix.wav");
    write_wav(&mix, &[0.0; 500], 16_000).unwrap();
    let emb = path(&dir, "e.f32");
    std::fs::write(&emb, [0u8; 1024]).unwrap();
    let out = tfmlp(&["extract", "--model", &model, "--in", &mix, "--embedding", &emb, "--out", &path(&dir, "t.wav")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn zero_input_through_zero_bias_model_gives_zero_outputs() {
    let dir = TempDir::new().unwrap();
    let model = save_small(&dir, "zero.tfmlp", true);
    let mix = path(&dir, "silence.wav");
    write_wav_i16(&mix, &vec![0.0; 1_000], 16_000).unwrap();
    let prefix = path(&dir, "spk");
    let out = tfmlp(&["separate", "--model", &model, "--in", &mix, "--out-prefix", &prefix]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for i in 1..=2 {
        let a = read_wav(format!("{prefix}{i}.wav")).unwrap();
        assert_eq!(a.samples.len(), 1_000);
        assert!(a.samples.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn inspect_reports_counts_and_sizes() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "default.tfmlp");
    assert_eq!(code(&tfmlp(&["init-random", "--seed", "1", "--out", &model])), 0);
    let out = tfmlp(&["inspect", &model]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains(&ModelConfig::default().param_count().to_string()));
    for part in ["encoder", "mixers", "lstms", "decoder", "fp32", "int8", "mix-lstm-fpconv-fullmlp"] {
        assert!(text.contains(part), "inspect lacks {part}:\n{text}");
    }
}

#[test]
fn profile_json_is_structured() {
    let dir = TempDir::new().unwrap();
    let model = save_small(&dir, "m.tfmlp", false);
    let out = tfmlp(&["profile", "--model", &model, "--seconds", "1", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["preset"], "fp32");
    assert!(doc["stages"].as_array().unwrap().iter().any(|s| s["stage"] == "block1.lstm"));
    assert!(doc["rtf"].as_f64().unwrap() > 0.0);
    // below the one-second minimum
    assert_eq!(code(&tfmlp(&["profile", "--model", &model, "--seconds", "0.5"])), 1);
}

#[test]
fn quantize_then_extract_writes_aligned_output() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "tse.json");
    std::fs::write(&cfg, r#"{"speakers": 1, "film": true, "blocks": 2, "channels": 8, "hidden": 8, "embed_dim": 16}"#).unwrap();
    let model = path(&dir, "tse.tfmlp");
    assert_eq!(code(&tfmlp(&["init-random", "--config", &cfg, "--seed", "2", "--out", &model])), 0);
    let calib = dir.path().join("calib");
    std::fs::create_dir(&calib).unwrap();
    let tone: Vec<f32> = (0..3_000).map(|i| (i as f32 * 0.07).sin() * 0.4).collect();
    write_wav_i16(calib.join("tone.wav"), &tone, 16_000).unwrap();
    let q = path(&dir, "tse-q.tfmlp");
    let out = tfmlp(&["quantize", "--model", &model, "--preset", "mix-lstm-fpconv", "--calib", &calib.to_string_lossy(), "--out", &q]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let emb = path(&dir, "dvec.f32");
    tfmlpnet::io::write_embedding(&emb, &[0.25; 16]).unwrap();
    let mix = path(&dir, "mix.wav");
    write_wav_i16(&mix, &tone[..2_345], 16_000).unwrap();
    let target = path(&dir, "target.wav");
    let out = tfmlp(&["extract", "--model", &q, "--in", &mix, "--embedding", &emb, "--out", &target]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_wav(Path::new(&target)).unwrap().samples.len(), 2_345);

    // wrong embedding size is a format error
    std::fs::write(&emb, [0u8; 12]).unwrap();
    assert_eq!(code(&tfmlp(&["extract", "--model", &q, "--in", &mix, "--embedding", &emb, "--out", &target])), 2);
}
