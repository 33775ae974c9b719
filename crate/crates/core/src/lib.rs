//! Adaptive subnetwork masking for rebalancing multi-modal training.
//!
//! Each modality's significance is estimated from a mutual-information-rate
//! lower bound and turned into an update ratio; a Fisher-weighted sample of
//! mask units then decides which parts of each modality's network receive
//! gradient updates at every step.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod plot;
pub mod sampling;
pub mod significance;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{AmssError, Result};
