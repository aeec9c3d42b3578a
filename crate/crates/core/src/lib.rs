//! gan-core: a desk-scale group affect classifier built from scratch.
//!
//! The crate stacks a small reverse-mode tensor engine ([`autodiff`]) under a
//! three-branch model: a scene-context visual encoder ([`visual`]), a
//! lexicon-tree semantic encoder ([`semantic`]), and a similarity-gated fusion
//! head ([`fusion`]), trained with a cross-entropy series plus a bidirectional
//! KL alignment loss ([`loss`]). [`harness`] drives training, evaluation, the
//! ablation runner, and the finite-difference gradient checker; [`data`] owns
//! the on-disk formats.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod semantic;
pub mod visual;

pub use error::Error;
pub use scalar::Scalar;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
