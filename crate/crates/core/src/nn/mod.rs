//! Minimal reverse-mode autodiff, the layers the model needs, and Adam.

pub mod gradcheck;
pub mod layers;
pub mod param;
pub mod tape;

pub use layers::{EncoderBlock, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use param::{AdamConfig, Bound, Param, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Tensor, Var};
