//! Flow-guided cross-scale feature alignment for multi-resolution
//! segmentation networks.

pub mod error;
pub mod backbone;
pub mod data;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
