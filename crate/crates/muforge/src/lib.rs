pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete-precision aliases. Tests and gradient checks run on the `f64`
/// family; training may use `f32` via the run config.
pub type Tape64 = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Mat64 = tape::Mat<f64>;
pub type Mat32 = tape::Mat<f32>;
