//! Hybrid CTC/attention speech recognition: autograd core, model, search,
//! training and scoring.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, audio and the
//! command line live in the companion `ctca` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod lm;
pub mod math;
pub mod model;
pub mod params;
pub mod rng;
pub mod search;
pub mod subword;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamSpec, ParamStore};
pub use tensor::Tensor;
