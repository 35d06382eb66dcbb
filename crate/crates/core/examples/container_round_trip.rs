//! Saves a model, reads back the header and tensor directory, and reloads
//! it bit for bit.

use tfmlpnet::io::{estimated_size, from_bytes, read_info, to_bytes};
use tfmlpnet::model::{Model, ModelConfig};

fn main() -> tfmlpnet::Result<()> {
    let model = Model::init_random(ModelConfig::default(), 11)?;
    let bytes = to_bytes(&model)?;
    let info = read_info(&bytes)?;
    println!("format v{}, preset {}, {} bytes", info.version, info.doc.preset, info.total_bytes);
    println!("estimate for fp32: {} bytes", estimated_size(model.config(), "fp32")?);
    for entry in info.tensors.iter().take(5) {
        println!("  {:<34} {:?} {:?}", entry.name, entry.shape, entry.dtype);
    }
    println!("  ... {} tensors", info.tensors.len());

    let back = from_bytes(&bytes)?;
    println!("reloaded model identical: {}", back.params() == model.params());
    Ok(())
}
