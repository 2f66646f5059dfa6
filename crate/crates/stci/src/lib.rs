//! Causality-aware spatiotemporal graph attention network for time-series
//! imputation, with a synthetic planted-truth data oracle.
//!
//! The crate is organized as:
//! - [`autodiff`]: minimal reverse-mode AD engine over dense 2-D arrays;
//! - [`data`]: synthetic VAR generator with planted causal structure, CSV
//!   ingestion, normalization, windowing, masking regimes;
//! - [`model`]: encoder (input/skip projections, temporal transformer,
//!   gated spatiotemporal causal attention) and prompt-based decoder;
//! - [`training`]: masked-MAE + l1 gate loss, Adam with cosine schedule,
//!   early stopping;
//! - [`analysis`]: metrics, causal-edge extraction and scoring, gate
//!   convergence stats, baselines, scaling benchmark, attention export;
//! - [`cli`]: the `stci` command-line entry point.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod training;
