pub mod assets;
pub mod audio_sim;
pub mod drd;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod probes;
pub mod vocoder;

pub use error::{Error, Result};
