//! Shared-feature actor-critic with mix and mask mechanisms.

pub mod autodiff;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mechanisms;
pub mod multiobj;
pub mod networks;
pub mod nn;
pub mod objectives;

pub use error::{Error, Result};
