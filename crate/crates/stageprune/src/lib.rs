// Index loops dominate the numeric kernels here and read better than
// iterator chains over flat buffers.
#![allow(clippy::needless_range_loop)]

//! Stage-wise structural pruning of a toy diffusion model.
//!
//! The pipeline: train a small denoiser, build per-stage calibration sets
//! matched to each stage's noise regime, precompute full pruning
//! trajectories (second-order with compensation, activation-weighted
//! magnitude masks, or block dropping), pack them into a routing database,
//! then search for the best per-stage sparsity schedule under a fixed
//! global budget with a budget-preserving evolutionary loop.

pub mod calib;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evo;
pub mod fitness;
pub mod linalg;
pub mod prune;
pub mod routedb;

pub use error::{Error, Result};
