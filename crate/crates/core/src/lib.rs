//! In-air imaging sonar network: array geometry, PDM-to-image signal
//! pipeline, synthetic echo generation, a framed TCP protocol, and the
//! sensor / central / application node runtimes.

pub mod bench;
pub mod dsp;
pub mod error;
pub mod geometry;
pub mod nodes;
pub mod pipeline;
pub mod synth;
pub mod wire;

pub use error::{Error, Result};
