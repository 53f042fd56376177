//! Sample-based trajectory planning with validity learning on closed-loop failures.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod learn;
pub mod logs;
pub mod sampler;
pub mod scorer;
pub mod sim;
pub mod validity;
pub mod world;

pub use error::{Error, Result};
pub mod verify;
