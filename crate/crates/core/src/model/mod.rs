//! The network: configuration, parameters, graph operations and the
//! streaming forward pass.

pub mod config;
pub mod graph;
pub mod params;
pub mod reference;
mod forward;

pub use config::ModelConfig;
pub use forward::{ForwardListener, Model, NoListener, Stage, StreamState};
pub use graph::{
    conv_batched_lstm_step, decode, encode, film_apply, freq_compress, freq_decompress, mixer_forward, Exec,
    FloatExec, LstmState, NodeKey, NodeKind,
};
pub use params::ModelParams;
