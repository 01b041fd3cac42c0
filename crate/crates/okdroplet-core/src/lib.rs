//! Numerical laboratory for the sharp-interface Ohta-Kawasaki energy
//!
//! ```text
//! F(E) = Per(E) + gamma * NL(E),    NL(E) = double integral over E x E of G(x, y),
//! ```
//!
//! where G is the Neumann Green function of the domain (flat torus or ball,
//! dimension 2 or 3) and E ranges over star-shaped droplets of prescribed
//! volume. The crate provides the Green-function machinery, two independent
//! energy evaluation routes, a volume-penalized shape optimizer, the second
//! variation spectrum at the ball, and an experiment harness with persistent,
//! reproducible outputs.

pub mod domain;
pub mod energy;
pub mod field;
pub mod greens;
pub mod numerics;
pub mod optimize;
pub mod shape;
pub mod stability;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type. Numerical failures carry enough context to be
/// reported by the CLI without chasing internals.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("geometry violation: {0}")]
    Geometry(String),
    #[error("numerical failure: {0}")]
    Numerics(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Schema tag stamped into every persisted JSON/CSV artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Version string recorded in experiment provenance blocks.
pub fn version_string() -> String {
    format!("okdroplet-{}", env!("CARGO_PKG_VERSION"))
}
