//! Deterministic desk-scale testbed for open-vocabulary detection
//! self-training: a synthetic world stands in for a frozen vision-language
//! backbone, and a two-branch detection head is trained from base-class
//! ground truth plus teacher pseudo labels.

pub mod embedspace;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod heads;
pub mod rng;
pub mod selftrain;
pub mod synthworld;

pub use error::{Error, Result};
