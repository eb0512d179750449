//! Dense-field copy-move forgery localization.
//!
//! The pipeline resamples an image into a three-level scale pyramid, extracts
//! per-pixel Zernike-moment descriptors (optionally also descriptors from a
//! small inference-only convolutional network), estimates a continuous
//! nearest-neighbor offset field with a cross-scale PatchMatch that uses a
//! softmax relaxation of the candidate argmax, measures how well the field is
//! explained by local affine motion, and decodes a binary copy-move mask.
//!
//! Modules, bottom-up:
//! - [`imgproc`]: raster type, resampling, warps, degradations, PNG/JPEG I/O.
//! - [`features`]: Zernike and convolutional feature maps over the pyramid.
//! - [`patchmatch`]: offset fields, candidate generation, scoring, selection.
//! - [`dlf`]: dense linear fitting error maps.
//! - [`maskgen`]: rule-based mask decoder, class masks, overlays.
//! - [`forgegen`]: synthetic copy-move forgery generator.
//! - [`harness`]: configuration, metrics, detection pipeline, sweeps.

pub mod dlf;
pub mod error;
pub mod features;
pub mod forgegen;
pub mod harness;
pub mod imgproc;
pub mod maskgen;
pub mod patchmatch;
pub mod rawio;

pub use error::{Error, Result};
