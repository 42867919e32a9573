//! Scale-invariant, position-sensitive region proposal networks on a small
//! deterministic CPU tensor engine.
//!
//! The crate covers the full path from pixels to scored proposals: a feature
//! pyramid ([`pyramid`]), six RPN head variants ([`heads`]), sliding-window
//! anchors ([`anchors`]), position-sensitive pooling and box coding
//! ([`pspool`]), label assignment and the training loss ([`assign`]), an SGD
//! trainer ([`train`]) and the average-recall evaluation protocol ([`eval`]).

pub mod anchors;
pub mod arch;
pub mod assign;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod heads;
pub mod model;
pub mod ops;
pub mod pspool;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Tape, Var};
pub use tensor::{Real, Tensor4};
