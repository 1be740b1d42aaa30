//! Distortion-aware linear precoding for the massive MIMO downlink.
//!
//! The base station drives every antenna through a memoryless polynomial
//! power amplifier. Gaussian precoded signals are split with the Bussgang
//! decomposition into a linear part `G x` and a distortion term `e` that is
//! uncorrelated with the input, which yields a closed-form lower bound on the
//! achievable sum rate. On top of that model the crate provides:
//!
//! - conventional precoders (MRT, ZF) and analytic zero-distortion precoders,
//! - projected gradient ascent on the sum rate (DAB) under a total or
//!   per-antenna power constraint,
//! - the two-stage consumed-power minimizer (EE-DAB),
//! - radiation patterns, energy efficiency, and OFDM spectral-regrowth
//!   analysis,
//! - a deterministic Monte-Carlo experiment harness.
//!
//! All powers are linear (watts, or volts squared in normalized units).
//! Conversions to dBm happen only at configuration and output boundaries.

pub mod bussgang;
pub mod channel;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod oob;
pub mod optimize;
pub mod pa;
pub mod precoders;

pub use error::{Error, Result};
pub use numerics::{Complex, ComplexMatrix, ComplexVector, RngStream};
