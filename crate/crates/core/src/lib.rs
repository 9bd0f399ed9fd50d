//! Site-specific analog beamforming toolkit.
//!
//! Pipeline: synthesize site channels ([`channel`]), probe them with a
//! codebook and model the RSRP feedback ([`measurement`]), optimize an
//! information-maximizing probing codebook ([`codebook`]), train a
//! flow-matching generator that turns RSRP vectors into candidate beams
//! ([`cfm`]), and evaluate against classical baselines ([`baselines`],
//! [`eval`]). Everything is driven by named seeds and reproduces bit-exact.

pub mod baselines;
pub mod cfm;
pub mod channel;
pub mod codebook;
pub mod error;
pub mod eval;
pub mod math;
pub mod measurement;
pub mod rng;

pub use error::{CoreError, Result};
pub use math::{ComplexMatrix, RealTensor, Tape, Var};
