//! Weakly-supervised sound event detection.
//!
//! A stacked convolutional-recurrent network is trained from clip-level
//! (weak) labels only and predicts frame-level (strong) event activity.
//! The crate bundles everything the pipeline needs:
//!
//! * [`features`]: log mel-band energy extraction and WAV/feature-file IO.
//! * [`autodiff`]: the small set of differentiable layers the networks use,
//!   Adam, and a finite-difference gradient checker.
//! * [`model`]: the dual-head CRNN, the MLP baseline, checkpoints and
//!   saliency maps.
//! * [`train`]: label replication, weighted two-head loss, the epoch loop
//!   with early stopping, and loss-weight sweeps.
//! * [`metrics`]: weak precision/recall/F and segment-based F / error rate.
//! * [`dataset`]: a seeded synthetic polyphonic generator and manifest IO.
//! * [`cli`]: the `wsed` command-line front end.

pub mod autodiff;
pub mod cli;
pub mod dataset;
mod error;
pub mod features;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
