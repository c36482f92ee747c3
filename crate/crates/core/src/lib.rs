pub mod benchdata;
pub mod error;
pub mod exitpolicy;
pub mod grad;
pub mod haltdist;
pub mod harness;
pub mod model;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
