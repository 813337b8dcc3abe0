//! Dual-stream cross-attention masked language modeling on a small
//! reverse-mode tensor engine.
//!
//! A Transformer encoder carries a plug-and-play cross-attention sublayer in
//! every layer. Each sequence of a pair gets two representation stacks: the
//! H-stream (self-attention only) and the S-stream (self-attention, then
//! cross-attention over the paired sequence's final H layer). The pre-trained
//! weights can be reused as an encoder-only classifier (cross-attention
//! unplugged), as a paired classifier (plugged in), or to fully initialize an
//! encoder-decoder translation model.

pub mod attention;
pub mod bleu;
pub mod checkpoint;
pub mod data;
pub mod finetune;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod params;
pub mod seq2seq;
pub mod tensor;
pub mod training;

pub use attention::{build_padding_mask, AttentionMask, AttentionParams};
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, TensorError, Var};
