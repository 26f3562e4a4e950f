pub mod autodiff;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
