//! Adaptive-noise defense against membership inference, the attacks it is
//! measured against, and the privacy-utility metrics used to compare defenses.

pub mod attacks;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
