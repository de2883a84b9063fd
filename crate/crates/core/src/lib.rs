//! Desk-scale workbench for task-driven learned image compression: a small
//! autodiff engine, a factorized-prior codec with exact range coding,
//! synthetic vision tasks with a frozen recognizer, auxiliary-loss training
//! with gradient-routing audits, an ROI/QF baseline, and BD-rate evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod coder;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod roi;
pub mod task;
pub mod training;

pub use error::{Error, Result};
