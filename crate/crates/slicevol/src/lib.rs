//! Organ volume estimation from 2D cross-sectional binary segmentations.
//!
//! The pipeline generates synthetic spleen-like voxel phantoms with known
//! volume, extracts coronal/transverse slices, trains a residual-block
//! variational autoencoder on the slices, and estimates 3D volume from the
//! 128-dimensional latent space with four methods (nearest neighbour, post-hoc
//! latent linear regression, and two end-to-end regression heads), optionally
//! with Monte-Carlo 95% confidence intervals.
//!
//! Modules roughly follow the pipeline order:
//!
//! * [`phantom`] — synthetic voxel phantoms, ground-truth volumetry, manual
//!   measurements (clinical baseline features)
//! * [`preprocess`] — resampling, canonicalization, mode filtering, slice
//!   extraction, rotation augmentation
//! * [`nn`] — minimal CPU neural-network layers with hand-written backprop
//! * [`vae`] — the residual VAE, losses, and the two-phase training loop
//! * [`estimators`] — the volume estimation methods and confidence intervals
//! * [`baselines`] — linear regression from manual measurements
//! * [`eval`] — metrics, stratified folds, cross-validation, latent PCA
//! * [`cli`] — config-driven command front end

pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod preprocess;
pub mod vae;

pub use error::{Result, SliceVolError};

/// Volume above which a case is labelled splenomegaly, in mL.
pub const SPLENOMEGALY_THRESHOLD_ML: f64 = 314.5;

/// Ground-truth volumes are divided by this factor for training and
/// predictions multiplied back by it at inference.
pub const VOLUME_SCALE: f64 = 10.0;
