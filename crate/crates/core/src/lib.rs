//! Continual learning over parameter-efficient tuning modules on a frozen
//! transformer: the learning / accumulation / ensemble protocol, its
//! baselines and a class-incremental benchmark harness.

pub mod bench;
pub mod checkpoint;
pub mod continual;
mod error;
pub mod model;
pub mod numerics;
pub mod pet;

pub use error::{Error, Result};
