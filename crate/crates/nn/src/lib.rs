//! Reverse-mode automatic differentiation over dense `f64` tensors, with the
//! layer set needed by sequence VAEs and small transformers: linear, tanh,
//! sigmoid, softmax, layer norm, LSTM, multi-head attention and Adam.
//!
//! Randomness never comes from ambient state: initializers take an explicit
//! generator and reparameterized sampling takes a caller-supplied noise
//! tensor.

pub mod checkpoint;
pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointSummary};
pub use error::{NnError, Result};
pub use layers::{Bind, LayerNorm, Linear, Lstm, MultiHeadAttention};
pub use params::{AdamConfig, ParamEntry, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
