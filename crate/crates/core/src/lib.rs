//! Parametric rectifiers, rectifier-aware weight initialization and the
//! variance analysis behind it, plus a small deterministic training stack
//! for checking convergence behaviour at desk scale.
//!
//! Everything runs in `f64`. Batch-level loops use rayon when the
//! `parallel` feature (on by default) is enabled; results are bitwise
//! identical with and without it.

pub mod analysis;
pub mod data;
pub mod error;
pub mod init;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::{sample_gaussian, RngStream};
pub use tensor::{matmul, moments, Tensor};
