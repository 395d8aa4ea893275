//! Numerical laboratory for path-dependent SDEs and PPDEs on a spectrally
//! truncated Hilbert space.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: truncated generator, semigroup, Hilbert–Schmidt norms;
//! - [`path`]: discretized path space, stopping map and `d_∞`;
//! - [`coeffs`]: non-anticipative coefficient functionals and builtins;
//! - [`noise`], [`sde`]: counter-based noise and the mild scheme;
//! - [`regression`], [`ppde`]: value-functional representation, Picard and
//!   BSDE solvers;
//! - [`viscosity`]: martingale, semijet, comparison and stability checks;
//! - [`stopping`], [`control`]: optimal stopping and stochastic control.

pub mod coeffs;
pub mod control;
pub mod error;
pub mod noise;
pub mod parallel;
pub mod path;
pub mod ppde;
pub mod regression;
pub mod sde;
pub mod spectral;
pub mod stopping;
pub mod viscosity;
pub mod stats;

pub use error::{Error, Result};
