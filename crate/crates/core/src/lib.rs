//! Core of a split subject-object-verb (SOV) human-object-interaction detector.
//!
//! Everything numerical lives here: box geometry (MBR/SMBR/ASMBR verb boxes,
//! IoU/GIoU, box noising), label-prior embeddings and query initialization,
//! denoising query construction with its attention mask, the anchor-conditioned
//! decoder stacks with box-constrained deformable attention, the vision advisor
//! and verb-HOI bridge, Hungarian matching, set-prediction losses, and triplet
//! mAP evaluation — all on an `f64` reverse-mode autodiff graph so gradients can
//! be checked against finite differences.
//!
//! The crate is `no_std` + `alloc`; IO, file formats and the CLI live in the
//! companion `sovstg` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod advisor;
pub mod decoder;
pub mod denoise;
pub mod evalmap;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod hoi;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod priors;
pub mod rng;
pub mod tensor;

pub use geometry::BBox;
pub use rng::Rng;
pub use tensor::Tensor;

use alloc::string::String;
use core::fmt;

/// Configuration-level failures surfaced by library constructors.
///
/// Shape mismatches inside the autodiff graph are programming errors and
/// panic instead; this type is for contract violations a caller can cause
/// with bad inputs (out-of-range class index, inconsistent dimensions, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Matrix/vector dimensions do not line up with the declared class counts.
    ShapeMismatch(String),
    /// A class index is outside the declared vocabulary.
    IndexOutOfRange { index: usize, bound: usize },
    /// An operation needs a non-empty set (e.g. every HOI instance has ≥ 1 verb).
    EmptySet(&'static str),
    /// A configuration value makes the requested operation impossible.
    InvalidConfig(String),
    /// More ground-truth instances than available queries.
    QueryBudgetExceeded { gts: usize, queries: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            CoreError::EmptySet(what) => write!(f, "empty set: {what}"),
            CoreError::InvalidConfig(m) => write!(f, "invalid configuration: {m}"),
            CoreError::QueryBudgetExceeded { gts, queries } => {
                write!(f, "{gts} ground truths exceed the query budget {queries}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
