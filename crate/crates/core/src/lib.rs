//! Causal transformer language model with a per-block visual memory, a
//! LoRA-adapted two-expert soft mixture, and the synthetic image-text world
//! used to train and probe it.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
