pub mod affinity;
pub mod autograd;
pub mod cam;
pub mod cbcam;
pub mod checkpoint;
pub mod clues;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod params;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
