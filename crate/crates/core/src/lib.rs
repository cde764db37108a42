//! Weakly supervised open-vocabulary segmentation over a synthetic world.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: vectors, matrices, similarity/softmax, seeded streams.
//! - [`encoders`]: frozen text and image encoders and the class-embedding bank.
//! - [`prompt`]: context-vector prompt learning with batch-mean injection.
//! - [`mask`]: proposal classification, aggregation, and few-shot refinement.
//! - [`world`]: scenes, datasets, pseudo-label corruption, proposals, episodes.
//! - [`eval`]: IoU bookkeeping and the GZSS / ZSS / FSS / cross-dataset runners.
//! - [`exec`]: data-parallel helpers (rayon behind the `parallel` feature).

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod encoders;
pub mod error;
pub mod eval;
pub mod exec;
pub mod mask;
pub mod numerics;
pub mod prompt;
pub mod world;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream, Vector};

/// Identifier of a semantic class. Id 0 is reserved for background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_vec(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(&canonical);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
