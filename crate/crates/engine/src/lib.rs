//! A small, single-threaded neural-network engine.
//!
//! Supports the fixed layer set needed by the obfuscation/inference networks
//! (dense, 2-D convolution, max-pooling, batch normalization, dropout, ReLU,
//! softmax, flatten, reshape), reverse-mode gradients for each of them,
//! AdaDelta and SGD optimizers, and a central-difference gradient checker.
//!
//! Everything is generic over [`Real`] so the same layer code runs in single
//! precision for training and in double precision for gradient checks.

mod error;
mod gemm;
pub mod gradcheck;
mod init;
pub mod layer;
pub mod loss;
pub mod network;
pub mod optim;
mod real;
mod tensor;

pub use error::{EngineError, Result};
pub use gradcheck::{gradient_check, gradient_check_with, CheckLoss, GradCheckReport};
pub use layer::{Layer, LayerKind, Padding};
pub use loss::cross_entropy;
pub use network::{GradScope, Gradients, LayerGrads, Mode, Network, NetworkBuilder};
pub use optim::{adadelta_step, AdaDelta, AdaDeltaConfig, AdaDeltaState, Optimizer, Sgd};
pub use real::Real;
pub use tensor::Tensor;
