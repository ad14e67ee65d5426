//! Aberration sensing from 3D fluorescence volumes.
//!
//! The pipeline simulates aberrated light-sheet volumes of sub-diffractive
//! puncta, turns each volume into a six-plane Fourier embedding, predicts
//! Zernike coefficients with a multistage vision transformer, checks the
//! prediction by digital rotation and closes the loop with iterative
//! correction and tile-wise Wiener deconvolution.
//!
//! Numeric kernels (Zernike evaluation, PSF synthesis, the transformer) are
//! generic over [`Real`]; the aliases below fix the precision used by each
//! pipeline stage.

pub mod confidence;
pub mod config;
pub mod corrloop;
pub mod embedding;
pub mod error;
pub mod fft;
pub mod io;
pub mod model;
pub mod optics;
pub mod predictor;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod volume;
pub mod zernike;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use scalar::Real;
pub use zernike::{AberrationKind, ZernikeCoeffs, ZernikeIndex};

/// Volume type used across the pipeline.
pub type Vol = volume::Volume<f64>;

/// PSF type produced by the optics stage.
pub type Psf = optics::Psf3D<f64>;

/// Model parameters in training precision.
pub type Params = model::ParamStore<f32>;
