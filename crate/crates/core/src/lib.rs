//! A laboratory for gradient inversion attacks against small networks in a
//! simulated federated-learning loop, with the client-side checks that defend
//! against them.

pub mod attack;
pub mod autodiff;
pub mod defense;
pub mod error;
pub mod exec;
pub mod fl;
pub mod metrics;
pub mod model;
pub mod params_io;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
