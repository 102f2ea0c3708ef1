//! Minimal reverse-mode autodiff used by every trainable component.

mod graph;
pub mod nn;
mod optim;
mod params;

pub use graph::{log_softmax_rows, sigmoid, softmax_rows, Grads, Graph, Mat, Var};
pub use optim::{clip_grad_norm, Adam};
pub use params::{ParamId, ParamStore};
