pub mod adaptation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod params;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
