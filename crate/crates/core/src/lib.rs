//! Simulation of MRI k-space artefacts, heteroscedastic uncertainty losses
//! with a cascaded student-teacher training protocol at toy scale, and
//! task-specific quality metrics (artefact variance, SNR, CNR, Dice,
//! volume error bars).
//!
//! Modules:
//! - [`volume`]: 3D grids, normalization, affine resampling, NIfTI-1 I/O
//! - [`spectral`]: 3D FFTs and k-space utilities
//! - [`artefact`]: the five k-space artefact simulators plus bias field and
//!   geometric augmentation, with sampling and provenance
//! - [`uncmath`]: the heteroscedastic loss family, consistency losses,
//!   entropy/variance conversions, volume error bars
//! - [`qcmetrics`]: scalar quality metrics and report assembly
//! - [`toytrain`]: a small differentiable segmentation model with built-in
//!   reverse-mode gradients, phantom generation, and the three-stage
//!   cascaded training protocol

pub mod artefact;
pub mod error;
pub mod qcmetrics;
pub mod rng;
pub mod spectral;
pub mod toytrain;
pub mod uncmath;
pub mod volume;

pub use error::{Error, Result};
pub use spectral::KSpace;
pub use volume::{Affine3D, LabelVolume, Volume};

/// Crate version string, embedded in output provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
