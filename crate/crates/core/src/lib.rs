pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod numerics;
pub mod pillars;
pub mod training;

pub use error::{Error, Result};
