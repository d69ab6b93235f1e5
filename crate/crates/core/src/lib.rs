//! Instruction-conditioned visual token compression.
//!
//! Replaces the N visual tokens a vision encoder emits per view with a
//! much shorter sequence built from two attention pathways: a bank of
//! globally cross-attending queries modulated by the instruction
//! (feature-wise affine conditioning), and per-window local summaries
//! whose queries carry an additive instruction injection. The crate
//! also ships the machinery to *verify* that construction: a
//! finite-difference-checked gradient tape, exact token/FLOP
//! accounting, binary tensor formats, and a synthetic retrieval task
//! that demonstrates instruction-steered attention end to end.

mod attn;

pub mod accounting;
pub mod autodiff;
pub mod conditioning;
pub mod ctf;
pub mod error;
pub mod eval;
pub mod nn;
pub mod params_io;
pub mod pipeline;
pub mod rng;
pub mod src;
pub mod stc;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
