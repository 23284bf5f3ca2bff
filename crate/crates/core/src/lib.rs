pub mod config;
pub mod datapipe;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod samplers;
pub mod sphere;
pub mod sritmo;
pub mod vq;

pub use error::{Error, Result};
