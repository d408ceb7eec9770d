//! Point-cloud feature distillation with bidirectional feature
//! reconfiguration and the feature mover's distance.
//!
//! Modules, bottom-up:
//! - [`pointops`]: sampling, neighbor search and resampling on point sets
//! - [`diffcore`]: reverse-mode differentiation and optimizers
//! - [`ot`]: exact and approximate transport distances, FMD and baselines
//! - [`bkr`]: gated top-down / bottom-up reconfiguration of student features
//! - [`nets`]: toy hierarchical point encoders
//! - [`harness`]: synthetic data, training, distillation and ablation
//! - [`study`]: FPS inconsistency histogram and OT benchmark

pub mod bkr;
pub mod diffcore;
mod error;
pub mod harness;
pub mod io;
pub mod nets;
pub mod ot;
pub mod pointops;
pub mod seed;
pub mod study;

pub use error::{Error, Result};
