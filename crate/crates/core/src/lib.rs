//! Billet-number recognition toolkit.
//!
//! The pieces, bottom up:
//!
//! - [`numeric`]: tensors, distributions, entropy, softmax, binarization.
//! - [`ctc`]: greedy CTC decoding with blank-run repair, lattice files.
//! - [`rules`]: positional encoding rules, validation and correction.
//! - [`model`]: a small conv + batch-norm frame classifier with hand-written
//!   backward passes, training and checkpoints.
//! - [`tta`]: entropy-minimizing test-time adaptation of BN scale/shift.
//! - [`synthgen`]: deterministic synthetic dot-matrix strips and datasets.
//! - [`harness`]: metrics, the ablation runner and entropy/error reports.
//! - [`cli`]: the `billetdec` command line.

pub mod cli;
pub mod ctc;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod rules;
pub mod synthgen;
pub mod tta;

pub use error::{Error, Result};
