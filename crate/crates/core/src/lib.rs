//! Cross-architecture distillation from a softmax-attention teacher into a
//! linear-time Mamba-2 style student.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: `f64` tensors and a reverse-mode tape.
//! - [`mixers`]: self-attention and the gated outer-product recurrence.
//! - [`model`]: plain patch-token backbones for teacher and student.
//! - [`distill`]: activation matching, masked prediction and training.
//! - [`bench`]: runtime and memory scaling of the two mixers.
//! - [`checks`]: finite-difference verification of all gradients.
//! - [`cli`]: the `linearizer` command line.

pub mod bench;
pub mod checks;
pub mod cli;
pub mod distill;
pub mod error;
pub mod mixers;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
