//! Desk-scale neural machine translation with sequence-level knowledge
//! distillation.

pub mod decode;
pub mod distill;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod textproc;
pub mod train;

pub use error::{Error, Result};
