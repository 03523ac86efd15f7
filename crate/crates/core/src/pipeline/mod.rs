//! Measurement-to-image processing.

mod config;
mod image;
mod workspace;

pub use config::{PipelineConfig, PipelineSettings, DEFAULT_ARRAY_SEED, DEFAULT_SPEED_OF_SOUND};
pub use image::{AcousticImage, AIMG_MAGIC, AIMG_VERSION};
pub(crate) use image::Reader;
pub use workspace::{new_workspace, Beamformer, Workspace};
