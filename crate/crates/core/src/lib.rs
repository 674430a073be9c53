//! Domain-incremental continual learning benchmark for multichannel ICU
//! time series.
//!
//! A sequence model is trained on a first clinical source, transferred to a
//! shifted regional source, and scored on both with a per-source average.
//! Forgetting is mitigated by one of five strategies (baseline, EWC,
//! replay, adjusted replay, combined) from [`strategy`].
//!
//! Module map:
//! - [`tensor`]: dense tensors and the reverse-mode tape.
//! - [`model`]: LSTM / BiLSTM classifiers and checkpoints.
//! - [`train`]: losses, Adam and the per-source training loop.
//! - [`strategy`]: memory buffer, EWC, replay scheduling.
//! - [`data`]: channel schema, region profiles, the cohort generator,
//!   episode files and cohort analysis.
//! - [`tasks`]: exclusions, hourly discretization, task extraction, splits.
//! - [`metrics`]: AUC-ROC, AUC-PR, kappa, MAD and per-source averages.
//! - [`harness`]: experiment protocol, grid search and reports.
//! - [`par`]: rayon-backed execution with a sequential fallback.
//! - [`cli`]: the `icudil` command line.

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod par;
pub mod seed;
pub mod strategy;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
