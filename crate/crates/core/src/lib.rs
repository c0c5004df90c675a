//! Software hardware-in-the-loop rig for engine ECU crank/cam testing.
//!
//! The pieces, bottom up:
//!
//! - [`signal`]: crank (60-2 wheel) and cam waveform tables over a 720° cycle
//! - [`fault`]: scenario parsing and per-tooth / sync fault transforms
//! - [`sensor`]: six auxiliary lookup-table sensor channels
//! - [`runtime`]: engine kinematics, frame production, wall-clock streaming
//! - [`ecu`]: virtual ECU decoder, injection emission and capture
//! - [`wavefile`]: CSV and raw-binary waveform formats

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ecu;
pub mod fault;
pub mod runtime;
pub mod sensor;
pub mod signal;
pub mod wavefile;
