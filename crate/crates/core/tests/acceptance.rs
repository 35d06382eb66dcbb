//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails; every criterion runs even after a failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmlpnet::engine::{compare_frequency_stages, compare_lstm_kernels};
use tfmlpnet::io::{estimated_size, read_wav, to_bytes, write_embedding, write_wav_i16};
use tfmlpnet::metrics::pit_score;
use tfmlpnet::model::{Model, ModelConfig};
use tfmlpnet::quant::{apply_plan, calibrate, PrecisionPlan, PRESETS};
use tfmlpnet::verify::{self, SuiteResult};

const SEED: u64 = 20;

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_suite(r: SuiteResult) -> Outcome {
    Outcome { passed: r.passed, detail: format!("{} = {:.3e} (limit {:.0e}), {}", r.name, r.measured, r.tolerance, r.detail) }
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn lstm_equivalence() -> Outcome {
    from_suite(verify::lstm_oracle(SEED).unwrap())
}

fn stft_reconstruction() -> Outcome {
    from_suite(verify::stft_round_trip(SEED).unwrap())
}

fn streaming_offline() -> Outcome {
    from_suite(verify::streaming_offline(SEED).unwrap())
}

fn causality() -> Outcome {
    from_suite(verify::causality(SEED).unwrap())
}

fn parameter_counts() -> Outcome {
    let bss = ModelConfig::default().param_count() as f64;
    let tse = ModelConfig::tse().param_count() as f64;
    let within = |n: f64, target: f64| (n / target - 1.0).abs() <= 0.15;
    Outcome {
        passed: within(bss, 493_000.0) && within(tse, 509_000.0),
        detail: format!("separation {bss} vs 493K, extraction {tse} vs 509K, limit 15%"),
    }
}

fn size_budget() -> Outcome {
    let cfg = ModelConfig::default();
    let model = Model::init_random(cfg.clone(), SEED).unwrap();
    let plan = calibrate(&model, &[noise(8_000, 1)], None, PrecisionPlan::preset("int8", &cfg).unwrap()).unwrap();
    let bytes = to_bytes(&apply_plan(&model, plan).unwrap()).unwrap().len();
    let estimate = estimated_size(&cfg, "int8").unwrap();
    Outcome {
        passed: bytes <= 600_000 && bytes <= 1_500_000 && estimate <= 600_000,
        detail: format!("int8 container {bytes} bytes (estimate {estimate}), limits 600000 and 1500000"),
    }
}

fn quant_lsb() -> Outcome {
    from_suite(verify::quant_lsb(SEED).unwrap())
}

fn fake_quant_properties() -> Outcome {
    from_suite(verify::fake_quant_properties(SEED).unwrap())
}

fn preset_completeness() -> Outcome {
    let cfg = ModelConfig::default();
    let mut unassigned = 0;
    for name in PRESETS {
        unassigned += PrecisionPlan::preset(name, &cfg).unwrap().unassigned(&cfg).len();
    }
    let model = Model::init_random(cfg.clone(), SEED).unwrap();
    let planned = apply_plan(&model, PrecisionPlan::preset("fp32", &cfg).unwrap()).unwrap();
    let x = noise(96 * 40, 2);
    let (a, b) = (model.process(&x, None).unwrap(), planned.process(&x, None).unwrap());
    let differing = a.data().iter().zip(b.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    Outcome {
        passed: unassigned == 0 && differing == 0,
        detail: format!("{} presets, {unassigned} unassigned nodes, fp32 plan differs in {differing} samples", PRESETS.len()),
    }
}

fn si_sdr_metric() -> Outcome {
    let suite = verify::si_sdr_checks(SEED).unwrap();
    let a = noise(500, 3);
    let b = noise(500, 4);
    let ea: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + 0.3 * y).collect();
    let eb: Vec<f32> = b.iter().zip(&a).map(|(x, y)| x - 0.2 * y).collect();
    let straight = pit_score(&[&a, &b], &[&ea, &eb]).unwrap();
    let swapped = pit_score(&[&a, &b], &[&eb, &ea]).unwrap();
    let symmetric = straight.mean_db == swapped.mean_db && swapped.permutation == [1, 0];
    Outcome {
        passed: suite.passed && symmetric,
        detail: format!("worst {:.3e} dB (limit 1e-9), PIT swap mean {} vs {}", suite.measured, swapped.mean_db, straight.mean_db),
    }
}

fn runtime_ordering() -> Outcome {
    let cfg = ModelConfig::default();
    let freq = compare_frequency_stages(&cfg, 1000, SEED).unwrap();
    let lstm = compare_lstm_kernels(&cfg, 1000, SEED).unwrap();
    Outcome {
        passed: freq.speedup >= 2.0 && lstm.speedup >= 2.0,
        detail: format!(
            "mixer vs BiLSTM {:.2}x, conv-batched vs per-bin {:.2}x (limit 2x, medians over {} chunks)",
            freq.speedup, lstm.speedup, freq.chunks
        ),
    }
}

fn tfmlp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tfmlp")).args(args).output().expect("spawn tfmlp")
}

fn cli_smoke() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut problems = Vec::new();
    let mut check = |what: String, out: std::process::Output| {
        if !out.status.success() {
            problems.push(format!("{what}: {:?} {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
        }
    };

    // 0.3 s mixture, deliberately not a whole number of hops
    let mix = noise(4_801, 5);
    write_wav_i16(p("mix.wav"), &mix, 16_000).unwrap();
    std::fs::create_dir(p("calib")).unwrap();
    write_wav_i16(Path::new(&p("calib")).join("a.wav"), &noise(4_000, 6), 16_000).unwrap();
    write_embedding(p("dvec.f32"), &noise(256, 7)).unwrap();
    std::fs::write(p("tse.json"), r#"{"speakers": 1, "film": true}"#).unwrap();
    check("init-random".into(), tfmlp(&["init-random", "--seed", "3", "--out", &p("bss.tfmlp")]));
    check(
        "init-random tse".into(),
        tfmlp(&["init-random", "--config", &p("tse.json"), "--seed", "3", "--out", &p("tse.tfmlp")]),
    );

    let mut wavs = Vec::new();
    for preset in PRESETS {
        for (kind, model) in [("bss", p("bss.tfmlp")), ("tse", p("tse.tfmlp"))] {
            let q = p(&format!("{kind}-{preset}.tfmlp"));
            check(
                format!("quantize {kind} {preset}"),
                tfmlp(&["quantize", "--model", &model, "--preset", preset, "--calib", &p("calib"), "--out", &q]),
            );
            if kind == "bss" {
                let prefix = p(&format!("sep-{preset}-"));
                check(format!("separate {preset}"), tfmlp(&["separate", "--model", &q, "--in", &p("mix.wav"), "--out-prefix", &prefix]));
                wavs.push(format!("{prefix}1.wav"));
                wavs.push(format!("{prefix}2.wav"));
            } else {
                let out = p(&format!("tse-{preset}.wav"));
                check(
                    format!("extract {preset}"),
                    tfmlp(&["extract", "--model", &q, "--in", &p("mix.wav"), "--embedding", &p("dvec.f32"), "--out", &out]),
                );
                wavs.push(out);
            }
        }
    }
    check("verify".into(), tfmlp(&["verify"]));

    for w in &wavs {
        match read_wav(w) {
            Ok(a) if a.samples.len() == mix.len() && a.sample_rate == 16_000 && a.samples.iter().all(|v| v.is_finite()) => {}
            Ok(a) => problems.push(format!("{w}: {} samples at {} Hz", a.samples.len(), a.sample_rate)),
            Err(e) => problems.push(format!("{w}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        passed: problems.is_empty() && secs < 60.0,
        detail: if problems.is_empty() {
            format!("{} WAVs of {} samples, verify exit 0, {secs:.1} s (limit 60 s)", wavs.len(), mix.len())
        } else {
            problems.join("; ")
        },
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("conv-batched LSTM equivalence", lstm_equivalence),
        ("STFT perfect reconstruction", stft_reconstruction),
        ("streaming equals offline", streaming_offline),
        ("causality", causality),
        ("parameter counts", parameter_counts),
        ("model size budget", size_budget),
        ("quantization LSB fidelity", quant_lsb),
        ("fake_quant properties", fake_quant_properties),
        ("preset completeness", preset_completeness),
        ("SI-SDR metric", si_sdr_metric),
        ("runtime ordering", runtime_ordering),
        ("CLI smoke", cli_smoke),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Outcome { passed: false, detail: "panicked".into() });
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {:>2} {name}: {}", i + 1, outcome.detail);
        failed += usize::from(!outcome.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
