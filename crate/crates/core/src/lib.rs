//! Convolutional random walk label diffusion.
//!
//! A per-pixel classifier produces unary class scores `f`; a tiny affinity
//! branch (one weight per feature channel) turns per-channel L1 feature
//! distances over a radius-limited neighborhood into affinities `W`; the
//! row-normalized random walk matrix `A = D^-1 W` then diffuses `f` so
//! predictions become spatially coherent. Training runs one damped walk step
//! at a large radius and backpropagates through both branches; inference
//! diffuses at a small radius until convergence.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod image;
pub mod pnm;
pub mod solver;
pub mod synth;
pub mod train;
pub mod walk;

pub use error::{Error, Result};
