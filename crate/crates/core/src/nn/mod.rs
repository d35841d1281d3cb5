//! Minimal tensor and reverse-mode differentiation toolkit used by the model.

pub mod graph;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
