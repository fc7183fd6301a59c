//! Simulator for a single-load vision-transformer accelerator: bit-exact
//! integer execution, cycle-level schedule replay, off-chip traffic
//! accounting and design-space analysis.

pub mod analysis;
pub mod config;
pub mod error;
pub mod functional;
pub mod packed;
pub mod par;
pub mod reference;
pub mod schedule;
pub mod traffic;
pub mod verify;

pub use config::{builtin_models, derive_dims, lookup_model, DerivedDims, HardwareConfig, ModelConfig};
pub use error::{Error, Result};
pub use par::Execution;
