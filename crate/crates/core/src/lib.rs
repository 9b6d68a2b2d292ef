//! Soft-error fault injection for U-Net segmentation models: fp32 and int8
//! inference, single-bit parameter faults, campaign statistics, structured
//! pruning and segmentation metrics.

pub mod campaign;
pub mod dataset;
pub mod error;
pub mod fault;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
