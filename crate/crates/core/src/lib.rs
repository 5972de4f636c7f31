pub mod acoustics;
pub mod env;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod manifest;
pub mod qnet;
pub mod replay;
pub mod seed;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
