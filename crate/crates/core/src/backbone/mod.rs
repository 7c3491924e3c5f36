//! Multi-branch high-resolution backbone.
//!
//! A stem of two stride-2 convolutions feeds four parallel branches at 1/1,
//! 1/2, 1/4 and 1/8 of the stem resolution. Each stage runs residual blocks
//! on every branch and then exchanges features between all branches:
//! shallower branches reach deeper ones through stride-2 3×3 convolutions,
//! deeper branches reach shallower ones through the configured [`Fusion`].
//! The head up-samples every branch to the first branch's resolution,
//! concatenates, classifies with a 1×1 convolution and up-samples by 4.

pub mod checkpoint;
mod network;
mod spec;

pub use network::{argmax, Network, UpFusion};
pub use spec::{Fusion, NetworkSpec, BRANCHES};
