//! Compute-update federated learning over a simulated multi-antenna
//! multiple-access channel.
//!
//! Devices normalize their model updates, quantize them onto a lattice with a
//! subtractive dither and transmit simultaneously without channel knowledge.
//! The server equalizes the superimposed signal, decodes an integer
//! combination of the lattice points and turns it into a global update.
//!
//! Module map:
//!
//! - [`lattice`]: generators, exact nearest-point decoders, dithers, second moments
//! - [`encoder`]: device-side normalization, dithered quantization, power scaling
//! - [`channel`]: fading MAC sampling and propagation
//! - [`receiver`]: equalization, lattice decoding and the layer-2 estimator
//! - [`coeff_select`]: integer aggregation weights per round
//! - [`learning`]: datasets, models, local SGD and the ideal FedAvg baseline
//! - [`bound`]: optimality-gap bound calculator
//! - [`harness`]: configuration, round loop, metrics and CSV output

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod channel;
pub mod coeff_select;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod learning;
pub mod linalg;
pub mod receiver;
pub mod seed;

pub use error::{Error, Result};
