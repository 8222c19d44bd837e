//! Audio-driven talking-head frame synthesis from a single fitted identity.
//!
//! The crate builds a small style-conditioned neural radiance field, binds a
//! procedurally generated blendshape face model into its coordinate system,
//! and animates the field by deforming camera rays along audio-correlated
//! vertex displacements. A residual latent network (`lipaint`) supplies
//! mouth-interior features that a single view cannot provide, and a feature
//! blender composes the final frames. Everything is CPU-only, f64, and
//! deterministic for a fixed configuration.
//!
//! Module map:
//! - [`face_model`]: linear blendshape model (mean + identity/expression PCA bases)
//! - [`audio`]: WAV ingest, resampling, mel spectrograms, audio-to-expression
//! - [`autodiff`]: minimal reverse-mode differentiation over dense f64 tensors
//! - [`field`]: positional encoding, latent mapping, and the field MLP
//! - [`render`]: deterministic stratified volume rendering and the upsampler
//! - [`deform`]: vertex binding and the spatial displacement field
//! - [`lipaint`]: self-supervised mouth-latent network and its training loop
//! - [`invert`]: two-phase latent inversion and coefficient refinement
//! - [`blend`]: mouth masks, temporal averaging, and feature blending
//! - [`metrics`]: PSNR, mouth opening, and envelope correlation
//! - [`pipeline`]: configuration, orchestration, and the flipped-pose harness

pub mod audio;
pub mod autodiff;
pub mod blend;
pub mod deform;
pub mod error;
pub mod face_model;
pub mod field;
pub mod image_io;
pub mod invert;
pub mod linalg;
pub mod lipaint;
pub mod metrics;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
