//! Conditional anomaly detection workbench: a procedural furniture benchmark
//! with reference multi-view renders, and a correspondence matching
//! transformer trained on it with a small reverse-mode autodiff engine.

pub mod anomaly;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pgm;
pub mod render;
pub mod train;
pub mod vlfa;

pub use error::{Error, Result};
