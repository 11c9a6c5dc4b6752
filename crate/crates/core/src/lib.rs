//! Spatio-temporal field inference.
//!
//! A target value at an unobserved spacetime coordinate is inferred from
//! nearby stations: each neighbor's known value is carried to the target by
//! integrating a learned gradient field along the straight path between
//! them, and the per-neighbor estimates are blended with learned softmax
//! weights.
//!
//! Module map:
//!
//! - [`geodata`]: ingestion, filtering, normalization, masking, context
//!   construction and the synthetic plume generator.
//! - [`encoding`]: the 10-dimensional spatio-temporal positional code.
//! - [`nn`]: small dense layers with hand-written backward passes.
//! - [`model`]: the field model, ring estimation, neighbor aggregation and
//!   checkpoints.
//! - [`training`], [`diagnostics`], [`baselines`], [`evalsuite`]: training
//!   loop, curl / path-independence diagnostics, reference predictors and the
//!   masked-station evaluation protocol.
//! - [`experiment`] and [`cli`]: JSON experiment configs and the `stfnn`
//!   command-line front end.

pub mod baselines;
pub mod checks;
pub mod cli;
pub mod diagnostics;
pub mod encoding;
pub mod error;
pub mod evalsuite;
pub mod experiment;
pub mod geodata;
pub mod model;
pub mod nn;
pub mod training;

pub use encoding::{encode, temporal_code, PeriodSet, StCode};
pub use error::{Error, Result};
pub use geodata::{
    AnalyticField, ContextSet, Coordinate, Normalizer, Source, StationDataset, StationRecord,
};
pub use model::{FieldModel, ModelConfig, PyramidEstimate};
