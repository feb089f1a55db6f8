//! Instruction-based task selection.
//!
//! The crate loads a meta-dataset of tasks and their natural-language
//! instructions, optionally normalizes instruction templates, embeds them,
//! ranks candidate training tasks by instruction similarity to a target
//! task, and turns a ranking into a training-mixture manifest.

pub mod align;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod mixture;
pub mod refine;
pub mod seeding;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
