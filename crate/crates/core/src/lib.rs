pub mod baselines;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod source;
pub mod synthgen;
pub mod target;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
