pub mod data;
pub mod error;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub mod losses;
pub mod nn;
pub mod pipeline;
