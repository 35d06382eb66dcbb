//! Calibrates every precision preset on noise and reports the container
//! size and the deviation from the float model.

use tfmlpnet::io::to_bytes;
use tfmlpnet::model::{Model, ModelConfig};
use tfmlpnet::quant::{apply_plan, calibrate, PrecisionPlan, PRESETS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> tfmlpnet::Result<()> {
    let cfg = ModelConfig::default();
    let model = Model::init_random(cfg.clone(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let calib: Vec<f32> = (0..8_000).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let probe: Vec<f32> = (0..96 * 50).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let reference = model.process(&probe, None)?;

    for preset in PRESETS {
        let plan = calibrate(&model, &[calib.clone()], None, PrecisionPlan::preset(preset, &cfg)?)?;
        let q = apply_plan(&model, plan)?;
        let out = q.process(&probe, None)?;
        println!(
            "{preset:<26} {:>9} bytes   max deviation {:.3e}",
            to_bytes(&q)?.len(),
            out.max_abs_diff(&reference)
        );
    }
    Ok(())
}
