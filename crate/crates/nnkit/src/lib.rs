//! Small reverse-mode differentiation engine for convolutional image networks.
//!
//! Provides the layers a two-stage light-field restorer needs (convolution,
//! kernel-2 transposed convolution, fully connected, residual block), an Adam
//! optimizer, a finite-difference gradient checker, and a checkpoint format.

mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod param;
mod scalar;
mod tensor;

pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use gradcheck::{gradcheck, BlockReport, GradReport, GradcheckOptions};
pub use graph::{softplus, CustomOp, Graph, InputGrads, Var};
pub use kernels::{matmul, MatRef};
pub use layers::{Conv2d, ConvTranspose2x2, LayerKind, LayerSpec, Linear, ResBlock};
pub use param::{ParamId, ParamKind, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
