//! A desk-scale sequence-to-sequence transformer laboratory.
//!
//! The crate trains small encoder/decoder transformers on synthetic tasks and
//! instruments the backward pass to show how layer normalization and residual
//! connections shape gradient flow through depth. Two ideas are implemented
//! end to end:
//!
//! * depth-scaled initialization, which shrinks each layer's init bound by
//!   1/sqrt(layer_depth) to keep error signals roughly norm-preserving, and
//! * a merged decoder attention block, which runs a cumulative-average
//!   self branch and the usual encoder-decoder attention in parallel through
//!   a shared output projection, cutting decoder parameters and decode cost.
//!
//! Everything is f64, row-major, single threaded, and deterministic given a
//! seed.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod init;
pub mod layers;
pub mod model;
pub mod probes;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use init::InitPolicy;
pub use rng::Rng;
pub use tape::{Mode, NodeId, Tape};
pub use tensor::Tensor;
