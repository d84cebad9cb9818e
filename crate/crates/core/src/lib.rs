//! Block-local training of convolutional networks with per-class goodness.

pub mod error;
pub mod data;
pub mod exec;
pub mod goodness;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod memory;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
