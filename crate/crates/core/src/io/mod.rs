//! Model containers and audio files.

pub mod audio;
pub mod container;

pub use audio::{read_embedding, read_wav, read_wav_dir, write_embedding, write_wav, write_wav_i16, AudioFile};
pub use container::{estimated_size, from_bytes, load_model, read_info, save_model, to_bytes, ContainerInfo};
