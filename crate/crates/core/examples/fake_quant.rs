//! Asymmetric per-tensor and symmetric per-channel quantization of a small
//! weight matrix, showing codes and round-trip error.

use tfmlpnet::quant::{dequantize_i8, fake_quant, quantize_i8, QuantParams};
use tfmlpnet::tensor::Tensor;

fn main() -> tfmlpnet::Result<()> {
    let w = Tensor::new(&[2, 4], vec![0.02, -0.4, 0.33, 0.1, 3.0, -1.5, 0.75, -2.9])?;

    let per_tensor = QuantParams::asymmetric_from_range(-2.9, 3.0, 8)?;
    let fq = fake_quant(&w, &per_tensor)?;
    println!("per-tensor int8 fake-quant max error {:.4}", fq.max_abs_diff(&w));

    // the first row has a much smaller range than the second
    let per_channel = QuantParams::symmetric_from_absmax(&[0.4, 3.0], 8)?;
    let codes = quantize_i8(&w, &per_channel, 0)?;
    let back = dequantize_i8(&codes, &per_channel, 0)?;
    println!("per-channel codes {:?}", codes.data());
    println!("per-channel max error {:.4}", back.max_abs_diff(&w));
    Ok(())
}
