//! Desk-scale multi-modal wind power forecasting.
//!
//! The pipeline embeds per-channel textual prompts and patched, instance-
//! normalized series into a shared representation, runs them through a
//! miniature frozen decoder backbone adapted with low-rank bypass factors,
//! and maps power-patch positions to a multi-station forecast. An experiment
//! harness provides synthetic data, baselines, ablations, few-shot sweeps,
//! and timing runs.

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
