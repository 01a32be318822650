//! Data-driven stochastic reduced-order models (S-ROM) for the 1D viscous
//! Burgers equation.
//!
//! The pipeline runs a finite-element full-order model from random initial
//! conditions, extracts an ensemble POD basis, assembles the Galerkin
//! operators, infers a quadratic closure with additive noise by regularized
//! least squares, and simulates the resulting discrete-time model.

pub mod error;
pub mod fem;
pub mod seed;
pub mod pod;
pub mod galerkin;
pub mod closure;
pub mod srom;
pub mod config;
pub mod io;
pub mod experiments;

pub use error::{Result, SromError};
