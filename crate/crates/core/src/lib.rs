//! Modular delta merging with orthogonal constraints.
//!
//! Task deltas (fine-tuned parameters minus a shared base) are
//! orthogonalized with modified Gram-Schmidt, combined with optimized
//! coefficients, and can later be removed again by exact subtraction. Every
//! merge, integration and removal is recorded in a hash-chained provenance
//! ledger.

pub mod bench;
pub mod cli;
pub mod eigen;
pub mod error;
pub mod fsutil;
pub mod hash;
pub mod merge;
pub mod optimize;
pub mod orthogonal;
pub mod params;
pub mod stability;
pub mod subspace;

pub use error::{ErrorClass, MdmError, Result};
