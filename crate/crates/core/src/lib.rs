pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod net;
pub mod registration;
pub mod rollout;
pub mod scenes;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
