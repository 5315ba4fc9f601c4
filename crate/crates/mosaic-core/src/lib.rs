//! Attribute-specialized mixture-of-experts for person re-identification,
//! together with the statistical machinery used to quantify per-attribute
//! importance from experiment grids.
//!
//! The crate is organized in three layers:
//!
//! * [`numerics`] — dense double-precision matrices, a portable seeded RNG,
//!   a reverse-mode tape with finite-difference gradient checking, and the
//!   AdamW update rule over a [`numerics::ParamStore`].
//! * The mechanism — [`schema`] (attribute taxonomy and annotations),
//!   [`mosaic`] (LoRA expert groups, oracle routing, pooling, residual
//!   injection), [`encoder`] (a small pre-norm transformer whose last K
//!   feed-forward blocks carry expert groups) and [`training`] (the
//!   three-part identity / triplet / image-to-anchor objective plus the
//!   two-stage training protocol with a frozen base).
//! * The analysis — [`experiments`] (synthetic benchmark, retrieval metrics,
//!   inclusion-mask grids) and [`attribution`] (Gaussian GLM, random-forest
//!   importances, exact Shapley values, Welch t-tests, Cohen's d).
//!
//! Everything here is `no_std + alloc`: all floating-point transcendentals go
//! through `libm`, so results are bit-reproducible across platforms. File
//! formats, fixtures and the command-line surface live in the companion
//! `mosaic-cli` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attribution;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod mosaic;
pub mod numerics;
pub mod schema;
pub mod training;

pub use error::Error;
