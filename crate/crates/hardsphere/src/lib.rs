//! Numerical laboratory for the low Mach number limit of compressible
//! Navier–Stokes flow with a hard-sphere pressure law.

pub mod error;
pub mod eos;
pub mod par;
pub mod quad;

pub use error::{Error, Result};
pub mod fields;
pub mod acoustics;
pub mod euler;
pub mod cns;
pub mod relent;
pub mod harness;
