pub mod audio;
mod binfmt;
pub mod error;
pub mod features;
pub mod graph;
pub mod ivector;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
