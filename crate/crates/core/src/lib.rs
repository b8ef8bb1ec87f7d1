//! Core library for training a spatio-temporal graph attention forecaster on
//! road-speed panels and for analysing what its attention looks at.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`] ingests, cleans, splits and synthesises speed panels.
//! * [`model`] is the encoder-decoder forecaster with spatial (graph) and
//!   temporal attention, its training loop and attention extraction.
//! * [`dependency`] holds DTW, spectral clustering and Granger tests.
//! * [`metrics`] computes per-road error tables, cohorts and view readouts.
//! * [`attention`] turns raw attention into view-ready products.
//! * [`enforcement`] runs the attention-replacement what-if.
//! * [`snapshot`] bundles everything into an immutable, hashable directory.

pub mod attention;
pub mod data;
pub mod dependency;
pub mod enforcement;
mod error;
pub mod metrics;
pub mod model;
pub mod snapshot;
pub mod util;

pub use error::{Error, Result};
