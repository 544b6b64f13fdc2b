//! Dense matrices, reverse-mode differentiation, and the layers built on it.

mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod params;

pub use gradcheck::{grad_check, relative_error, CoordinateCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Backward, Graph, Pick, Var};
pub use layers::{dropout, softmax, Attended, BiLstm, Embedding, LayerNorm, Linear, Lstm, MultiHeadAttention};
pub use matrix::{argmax, Matrix};
pub use params::{Gradients, Init, ParamId, ParameterStore};
