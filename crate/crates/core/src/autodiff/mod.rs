//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Just enough machinery to train the window tagger and to compute
//! per-sentence log-likelihood gradients for Fisher estimation: rank-1/2
//! f64 tensors, a named parameter store with gradient slots, and a linear
//! tape of primitives replayed in reverse.

pub mod param;
pub mod tape;
pub mod tensor;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Source, Tape};
pub use tensor::Tensor;
