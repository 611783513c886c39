pub mod checkpoint;
pub mod data;
pub mod error;
pub mod formats;
pub mod langevin;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
