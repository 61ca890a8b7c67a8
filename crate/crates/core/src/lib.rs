//! Attention-aligned prototypical few-shot learning and explanation-guided
//! active learning, built on a small reverse-mode autodiff engine.
//!
//! Module map:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation over [`Tensor`]s.
//! * [`backbone`]: the convolutional encoder and its checkpoint format.
//! * [`fewshot`]: episodes, prototypes, distance softmax, prototypical loss.
//! * [`attribution`]: Grad-CAM and Integrated Gradients heatmaps.
//! * [`alignment`]: soft Dice loss, hard Dice/IoU, permutation control.
//! * [`trainer`]: the joint objective, Adam training loop and evaluation.
//! * [`active`]: acquisition scoring and the active-learning loop.
//! * [`synthdata`]: the synthetic lesion benchmark, PGM and manifest IO.

pub mod active;
pub mod alignment;
pub mod attribution;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
