//! Simulation and training library for hypernetwork-personalized federated
//! CT imaging: fan-beam physics, synthetic phantoms and datasets, a FiLM
//! hypernetwork, the shared imaging networks, a federated training engine
//! and image-quality metrics.

pub mod checkpoint;
mod codec;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod film;
pub mod hypernet;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod physics;
pub mod presets;

pub use error::{Error, Result};
