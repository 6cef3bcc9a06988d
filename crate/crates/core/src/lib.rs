//! Tasks as masking schemes over DoorKey trajectories: data generation, an
//! exact inference oracle, a bidirectional transformer trained under
//! configurable masking regimes, and the evaluation pipeline around it.

mod error;
pub mod evaluation;
pub mod gridworld;
pub mod inference;
pub mod masking;
pub mod model;
pub mod training;
pub mod oracle;

pub use error::{Error, Result};
