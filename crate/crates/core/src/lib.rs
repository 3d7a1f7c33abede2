//! Weight-provenance detection for transformer checkpoints.
//!
//! Two models are compared by recovering the orthogonal and permutation
//! transforms that would map one onto the other, then scoring how unlikely
//! the recovered alignment is under independently trained weights.
//!
//! The numerical core ([`matlin`], [`assign`]) is generic over [`Scalar`]
//! (`f32` or `f64`); model-level code works in `f64` through [`Matrix`].

pub mod assign;
pub mod detect;
pub mod error;
pub mod forge;
pub mod ldt;
pub mod matlin;
pub mod report;
pub mod scalar;
pub mod vocab;
pub mod weights;

pub use detect::{run_mdir, run_mdir_on, DetectConfig, DetectionReport, MlpMode, Stage};
pub use error::{Error, Result};
pub use forge::{apply_plan, make_toy_model, sample_plan, Level, ObfuscationPlan};
pub use matlin::DenseMatrix;
pub use scalar::Scalar;
pub use vocab::{intersect_vocabs, TokenIntersection, VocabMap};
pub use weights::{load_model, ArchSpec, ModelBundle, Role};

/// Double-precision matrix used by every model-level computation.
pub type Matrix = DenseMatrix<f64>;
/// Single-precision matrix.
pub type Matrix32 = DenseMatrix<f32>;
