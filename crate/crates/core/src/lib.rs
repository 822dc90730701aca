//! Multi-instance visual prompt generation on a small, self-contained
//! autodiff engine.

pub mod attention;
pub mod error;
pub mod graph;
pub mod harness;
pub mod macs;
pub mod mil;
pub mod mivpg;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Eval, Graph};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
