//! Dense tensors and reverse-mode differentiation.

mod graph;
mod tensor;

pub use graph::{AttentionKind, Graph, Span, Var};
pub use tensor::{dot, Tensor};
