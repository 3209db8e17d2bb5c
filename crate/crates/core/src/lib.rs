//! Sequential Bayesian experimental design with tensor-train transport maps.

pub mod config;
pub mod design;
pub mod error;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod runner;
pub mod snapshot;
pub mod soed;
pub mod subspace;
pub mod transport;

pub use error::{Result, SoedError};
