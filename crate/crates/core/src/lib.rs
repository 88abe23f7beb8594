//! Wake-vortex simulation, contrastive pretraining and evaluation.

pub mod augment;
pub mod baselines;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod finetune;
pub mod io;
pub mod model;
pub mod rng;
pub mod sim;

pub use error::{Result, VortexError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
