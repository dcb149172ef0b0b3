//! Weakly supervised segmentation from image-level labels: LLM-derived
//! category clusters, a cluster-conditioned patch classifier with a patch
//! contrastive objective, and dense-CRF pseudo-label generation.

pub mod clustering;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{CpcError, Result};
