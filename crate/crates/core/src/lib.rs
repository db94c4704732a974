//! Desk-scale training toolkit for bidirectional autoregressive language models.
//!
//! The crate covers the full pipeline on a byte-level vocabulary:
//!
//! * [`tensor`], [`tape`] and [`gradcheck`]: a small dense tensor type with
//!   reverse-mode differentiation and a central-difference checker.
//! * [`model`]: a direction-conditioned decoder transformer that predicts each
//!   token from its left context or from its right context.
//! * [`train`]: the bidirectional pre-training loss, instruction tuning with
//!   prompt masking, dialogue flattening and an Adam training loop.
//! * [`rlhf`]: hinge-loss reward model, the regularized RL objective and a
//!   sequence-level PPO loop, plus rule-based AI feedback.
//! * [`expansion`]: function-preserving width growth and progressive depth
//!   stacking.
//! * [`data`], [`checkpoint`], [`eval`]: tokenizer and corpora, the binary
//!   checkpoint container, and a multiple-choice evaluation harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod gradcheck;
pub mod model;
pub mod precision;
pub mod rlhf;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

mod parallel;

pub use error::{Error, Result};
pub use precision::{precision, set_precision, with_precision, Precision};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
