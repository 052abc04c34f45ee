//! Electro-optic temporal shaping of single photons from a pulsed
//! quantum-dot source: wavepackets, modulator transfer, gated TCSPC
//! simulation and analysis.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod detect;
pub mod emitter;
pub mod eomod;
pub mod error;
pub mod sigcore;

pub use error::{Error, Result};
