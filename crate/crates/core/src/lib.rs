//! Box-sensitive confidence calibration for object detectors.
//!
//! The pipeline runs detections through IoU matching ([`matching`]), turns
//! each matched detection into a calibration input ([`features`]), fits one of
//! five calibration maps ([`calibrators`]) and scores the result with the
//! detection expected calibration error ([`metrics`]). [`synth`] produces
//! matched samples with known, location-dependent miscalibration and
//! [`harness`] runs the repeated split evaluation protocol.

pub mod calibrators;
pub mod cli;
pub mod detections;
pub mod error;
pub mod features;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod optimizer;
pub mod synth;

pub use error::{Error, Result};
