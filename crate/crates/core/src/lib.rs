//! Memory-augmented streaming video modelling at desk scale.
//!
//! Frames are consumed one at a time by a small Q-Former whose attention
//! keys and values come from bounded memory banks. When a bank overflows it
//! is compressed by merging the most similar temporally adjacent tokens, so
//! memory and output size stay constant however long the stream runs.

pub mod autodiff;
pub mod error;
pub mod memory_bank;
pub mod pipeline;
pub mod qformer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
