//! Dense tensors, a define-by-run reverse-mode tape and first-order optimizers.

mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_subset};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use params::ParameterStore;
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
