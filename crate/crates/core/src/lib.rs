//! Signature verification with spatial pyramid pooling CNNs.

pub mod error;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sigproc;
pub mod spp;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod wd;

pub use error::{ContainerError, Error, ErrorClass, Result};
pub use nn::{Mode, Model, NetworkSpec};
pub use spp::PyramidSpec;
pub use tensor::{Scalar, Tensor4};
