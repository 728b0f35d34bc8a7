//! Split federated multi-task learning at desk scale.
//!
//! Clients own a patch embedding, a task adaptation module and a task
//! head; a server owns the shared general model and aggregates per-client
//! gradients by attention rescaling plus conflict projection, with plain
//! averaging as the baseline. A synthetic benchmark harness generates
//! multi-task data with a controllable gradient-conflict angle.

pub mod adaptation;
pub mod error;
pub mod gpaggr;
pub mod gradset;
pub mod harness;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use gradset::{GradientSet, Schema};
pub use rng::SplitMix64;
pub use tensor::{softmax, Dtype, DynTensor, Scalar, Tensor};
