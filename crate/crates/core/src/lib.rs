//! Probabilistic diffeomorphic registration of 2-D image pairs.
//!
//! The crate implements a conditional variational autoencoder that encodes
//! the deformation between a moving and a fixed image into a low-dimensional
//! latent code and decodes it into multi-scale stationary velocity fields.
//! Velocities are Gaussian-smoothed, exponentiated into diffeomorphisms by
//! scaling and squaring, and used to warp the moving image; training
//! maximizes a symmetric local cross-correlation likelihood against a unit
//! Gaussian latent prior.
//!
//! Module map:
//!
//! * [`tensor`], [`tape`] -- dense tensors and the reverse-mode autodiff engine
//! * [`diffeo`] -- velocity exponentiation, warping, Jacobians, smoothing
//! * [`objective`] -- symmetric LCC, closed-form KL, the multi-scale loss
//! * [`model`] -- the encoder/decoder network and checkpoints
//! * [`train`] -- Adam loop, augmentation, metrics logging
//! * [`phantom`] -- synthetic contracting-annulus dataset generator
//! * [`metrics`] -- Dice/HD95/RMSE/Jacobian-regularity evaluation
//! * [`latent`] -- PCA over codes, sampling, transport, linear probe
//! * [`io`] -- DRT1 tensor files and PGM export

pub mod diffeo;
pub mod error;
pub mod io;
mod kernels;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod phantom;
pub mod seeding;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{DregError, Result};
