pub mod analysis;
pub mod caption_encoder;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gesa;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{GevstError, Result};
