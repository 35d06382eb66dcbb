pub mod dsp;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
