//! Compression-token pretraining for a miniature multimodal embedding model.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
