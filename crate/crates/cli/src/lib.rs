//! Operator commands for the attentive VQ-VAE: train, eval, restore,
//! corrupt and inspect.

pub mod config;
pub mod corrupt;
mod error;
pub mod eval;
pub mod inspect;
pub mod restore;
pub mod train;

pub use config::{Overrides, RunConfig, TaskKind};
pub use error::{CliError, Result};
