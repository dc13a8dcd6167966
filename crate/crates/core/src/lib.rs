//! Desk-scale attribute-activated text encoding.
//!
//! A miniature bidirectional transformer text encoder is augmented with a
//! dual-stage attribute mechanism: extracted attribute phrases become
//! norm-preserving prefix rows at the input, and a condition vector derived
//! from their spans modulates K/V projections at early layers. A synthetic
//! fine-grained detection benchmark, the training objectives, and the
//! evaluation/analysis protocols live alongside.
//!
//! Everything here is pure computation over `alloc`; file formats, HTTP, and
//! the command-line front end live in the companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
// Validation uses `!(x > 0.0)` so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod analysis;
pub mod dsaa;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod hungarian;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod world;

pub use tape::{NodeId, Tape};
pub use tensor::{NumericsError, Tensor};
