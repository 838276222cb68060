//! Multilevel training of small GPT-style decoders on CPU.
//!
//! The crate trains a fixed-depth transformer decoder two ways: the standard
//! single-level loop, and a multilevel loop that builds two half-depth coarse
//! models by aliasing every second block of the fine model (even-indexed and
//! odd-indexed), trains them cheaply, and blends their parameters back into
//! the fine model. A closed-form FLOP model makes the two regimes comparable
//! on equal terms.

mod attn;
mod kernels;

pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod multilevel;
pub mod optim;
pub mod scalar;
pub mod step;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;
