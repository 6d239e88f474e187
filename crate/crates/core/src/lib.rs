pub mod audio_io;
pub mod augment;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
