pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod dsp;
mod error;
pub mod generator;
pub mod metrics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
