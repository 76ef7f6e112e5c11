//! Core library for a panoramic instruction-following navigation agent.
//!
//! Everything is built around three layers:
//!
//! * [`tensor`]: a small f64 reverse-mode autodiff engine plus AdamW. All
//!   learning code in this crate differentiates through it.
//! * [`world`]: synthetic houses (random geometric graphs with panoramic
//!   views), instruction generation, datasets and splits.
//! * the agent stack: text/orientation/vision encoders, the navigation
//!   policy with its three scoring modules, pretraining tasks, training
//!   loops and evaluation metrics.
//!
//! Determinism is a hard requirement: every random draw flows from an
//! explicit seed through [`rng`], numeric reductions run in fixed order on a
//! single thread, and reruns with equal inputs produce byte-identical
//! artifacts.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod pretrain;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
