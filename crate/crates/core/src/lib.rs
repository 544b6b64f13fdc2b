pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod proposer;
pub mod pyramid;
pub mod trainer;

pub use error::{Error, Result};
