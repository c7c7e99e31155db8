//! Layer-partitioned CNN training with step-wise activations, and an auditor
//! that measures how well a convolution layer's input can be reconstructed
//! from its output.

pub mod activations;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod inversion;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod split;
pub mod tensor;

pub use activations::{Activation, StepWiseConfig};
pub use error::{Error, Result};
pub use network::{Layer, Model};
pub use tensor::{ConvSpec, PoolMode, Tensor};
