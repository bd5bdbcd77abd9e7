//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Parameters live in a [`ParamStore`] and are bound per
//! step. The engine is generic over [`Real`] so gradient checks run in f64.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, rel_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Conv2dSpec, Graph, Var};
pub use params::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Adam, AdamConfig, ParamId, ParamStore,
};
pub use tensor::{Real, Tensor};
