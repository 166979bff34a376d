//! Dense matrices, a reverse-mode tape, and parameter bookkeeping.

pub mod gradcheck;
mod graph;
mod matrix;
mod params;

pub use graph::{AttnMask, ConvGeom, Gradients, Graph, Var};
pub use matrix::Tensor;
pub use params::{all_grad, no_grad, Binder, Initializer, ParamSet};
