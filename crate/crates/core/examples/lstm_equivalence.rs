//! Compares the convolution-batched LSTM step against the bin-by-bin
//! reference on the first block of a random model.

use tfmlpnet::model::reference::reference_batched_lstm_step;
use tfmlpnet::model::{conv_batched_lstm_step, LstmState, Model, ModelConfig};
use tfmlpnet::tensor::Tensor;

fn main() -> tfmlpnet::Result<()> {
    let cfg = ModelConfig::default();
    let model = Model::init_random(cfg.clone(), 1)?;
    let lstm = &model.params().blocks[0].lstm;
    let bins = cfg.block_bins();

    let mut batched = LstmState::zeros(cfg.hidden, bins);
    let mut reference = batched.clone();
    let mut worst = 0.0f32;
    for t in 0..50 {
        let x: Vec<f32> = (0..cfg.channels * bins).map(|i| ((i * 7 + t * 13) as f32 * 0.01).sin()).collect();
        let x = Tensor::new(&[cfg.channels, bins], x)?;
        let got = conv_batched_lstm_step(&x, lstm, &mut batched)?;
        let (want, next) = reference_batched_lstm_step(&x, lstm, &reference)?;
        reference = next;
        worst = worst.max(got.max_abs_diff(&want)).max(batched.c.max_abs_diff(&reference.c));
    }
    println!("50 steps over {bins} bins, worst absolute difference {worst:.3e}");
    Ok(())
}
