//! Surface-electrode ion trap with a tunable single-well / double-well radial
//! pseudopotential, and its use as a Frenkel-Kontorova nanofriction emulator.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: planar electrode layouts and gapless-plane electrostatics.
//! * [`fields`]: RF field, ponderomotive pseudopotential and the total
//!   single-ion potential energy landscape.
//! * [`nodes`]: RF nodes, the single-well to double-well bifurcation, and
//!   barrier / separation curves.
//! * [`crystal`]: Coulomb crystal energy, gradient and equilibrium solver.
//! * [`modes`]: Hessian and normal-mode analysis with symmetry labels.
//! * [`corrugation`]: corrugation potential between parallel strings, the
//!   corrugation parameter and quasi-static sliding.
//! * [`dc_control`]: minimum-norm DC electrode voltages via the KKT system.
//!
//! All quantities are SI internally. Conversion helpers for the reporting
//! units (µm, meV, MHz) live in [`units`].

// `!(x > 0.0)` is used deliberately so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corrugation;
pub mod crystal;
pub mod dc_control;
mod error;
pub mod fields;
pub mod geometry;
pub mod minimize;
pub mod modes;
pub mod nodes;
pub mod units;

pub use error::{Error, Result};

/// Library version embedded in every exported artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
