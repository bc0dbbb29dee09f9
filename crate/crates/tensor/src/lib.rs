//! Reverse-mode automatic differentiation over dense volumetric tensors.
//!
//! Operations are methods on [`Var`], a handle into a [`Tape`]. A forward pass
//! records nodes; [`Tape::backward`] sweeps them in reverse.

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use ops::attention::{attention_weights, multi_head_attention, Projection, QkvProjection};
pub use ops::encoding::{positional_encoding, Modality};
pub use ops::loss::{ssim, ssim_map, SsimConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
