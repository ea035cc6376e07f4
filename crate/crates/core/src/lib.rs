//! Multi-scale multi-target domain adversarial network.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
