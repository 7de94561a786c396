pub mod ablation;
pub mod config;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod registry;
pub mod render;
pub mod sensors;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
