//! Acoustics-specific piano velocity transcription.
//!
//! The crate covers the whole experimental pipeline:
//!
//! - [`synth`]: a deterministic additive piano renderer with six acoustic presets,
//! - [`dataset`]: MIDI ingestion, synthetic performances and cluster-stratified splits,
//! - [`separation`]: score-informed NMF note separation and 13x30 MFCC note features,
//! - [`model`]: the residual CNN family (encoder, performers, context classifier),
//! - [`training`]: Adadelta, LR range test, RotoGrad, context batching, early stopping,
//! - [`evaluation`]: trial scoring, win analysis and nonparametric statistics,
//! - [`pipeline`]: the reproducible command layer driven by a JSON run config.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod separation;
pub mod synth;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
