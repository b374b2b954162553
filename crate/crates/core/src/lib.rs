//! Direction-of-arrival estimation for uniform linear arrays.
//!
//! The crate couples a transformer-based noise-subspace estimator with the
//! MUSIC spectrum and ships the classical baselines it is measured against:
//!
//! - [`linalg`]: complex matrices, sample covariance, Hermitian Jacobi EVD.
//! - [`array`]: ULA snapshot simulation and the complex one-bit quantizer.
//! - [`dataset`]: labeled dataset generation and the `TMDS` file format.
//! - [`classical`]: MUSIC, Bartlett beamformer, arcsine-law one-bit MUSIC,
//!   eigenvalue-based source counting.
//! - [`nn`]: a small reverse-mode autodiff tape, layers and Adam.
//! - [`model`]: the learned estimator (encoder, average unit, subspace head,
//!   spectrum layer, peak finder, source-number classifier).
//! - [`training`]: RMSPE / cross-entropy losses and the training loop.
//! - [`bench`]: SNR and snapshot-count sweeps, aggregation, CSV/SVG output.

pub mod array;
pub mod bench;
pub mod classical;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use num_complex::Complex64;
