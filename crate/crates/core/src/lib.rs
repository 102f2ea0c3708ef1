//! Dense video captioning with a semantic concept stream: data handling,
//! concept detection, multi-scale deformable transformer, prediction heads,
//! training and evaluation.

pub mod autograd;
pub mod concepts;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod pyramid;
pub mod training;
pub mod transformer;

pub use error::{DvcError, Result};
