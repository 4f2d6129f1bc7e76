//! Freeform illumination design with spherical-harmonic surfaces and
//! neural surrogates.
//!
//! The pipeline: [`designgen`] builds ground-truth surfaces by ray mapping
//! and Levenberg-Marquardt fitting, [`optics`] raytraces them to score the
//! illumination pattern, and [`surrogate`] learns the map from target
//! parameters to surface coefficients.

pub mod designgen;
pub mod error;
pub mod lm;
pub mod optics;
pub mod rng;
pub mod shsurface;
pub mod surrogate;

pub use error::{Error, Result};

/// Version of the model and database file layouts.
pub const SCHEMA_VERSION: u32 = 1;
