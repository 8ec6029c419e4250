//! Desk-scale simulator and key-distillation pipeline for decoy-state BB84
//! quantum key distribution from a ground transmitter to a moving receiver.
//!
//! The crate is organised by subsystem, in the order data flows through a pass:
//!
//! - [`kinematics`]: pass trajectories (arc, line, circular orbit), ranges,
//!   angular rates and photon time of flight.
//! - [`pointing`]: two-site acquisition and tracking, camera-feedback coarse
//!   control and quad-cell fine pointing.
//! - [`channel`]: per-second optical link budget and background rates.
//! - [`transmitter`]: the repeating decoy-state pulse table, fiber polarization
//!   drift, tomography and wave-plate compensation.
//! - [`receiver`]: passive-basis analyzer, detectors and time tagging.
//! - [`distill`]: correlation, sifting, SNR filtering, decoy bounds, LDPC
//!   reconciliation, Toeplitz privacy amplification and key length.
//! - [`runner`]: configuration, end-to-end orchestration and reporting.

// `!(x <= max)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod distill;
pub mod error;
pub mod io;
pub mod kinematics;
pub mod oracle;
pub mod pointing;
pub mod receiver;
pub mod rng;
pub mod runner;
pub mod selftest;
pub mod transmitter;

pub use error::{Error, Result};
