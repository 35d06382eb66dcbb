//! Scores estimates with SI-SDR, its improvement over the mixture, and
//! permutation-invariant assignment.

use tfmlpnet::metrics::{pit_score, si_sdr, si_sdr_improvement};

fn main() -> tfmlpnet::Result<()> {
    let a: Vec<f32> = (0..4_000).map(|n| (n as f32 * 0.031).sin()).collect();
    let b: Vec<f32> = (0..4_000).map(|n| (n as f32 * 0.117).cos() * 0.6).collect();
    let mix: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let est_a: Vec<f32> = a.iter().zip(&b).map(|(x, y)| 2.0 * (x + 0.05 * y)).collect();
    let est_b: Vec<f32> = b.iter().zip(&a).map(|(x, y)| x + 0.1 * y).collect();

    println!("SI-SDR(a, mix)   {:7.2} dB", si_sdr(&a, &mix)?);
    println!("SI-SDR(a, est_a) {:7.2} dB (estimate is scaled by 2)", si_sdr(&a, &est_a)?);
    println!("SI-SDRi(a)       {:7.2} dB", si_sdr_improvement(&a, &est_a, &mix)?);

    // estimates handed over in the wrong order
    let pit = pit_score(&[&a, &b], &[&est_b, &est_a])?;
    println!("PIT permutation {:?}, scores {:.2?}, mean {:.2} dB", pit.permutation, pit.scores, pit.mean_db);
    Ok(())
}
