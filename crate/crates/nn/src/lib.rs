//! Small reverse-mode autodiff engine for CPU training of compact
//! convolutional networks in `f64`.
//!
//! The engine is deliberately narrow: it offers exactly the layers the
//! segmentation, discriminator and classifier networks need, records them on
//! a tape, and differentiates back to parameter leaves. Loss functions live
//! with their callers and enter the tape as gradient seeds.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{sigmoid, ConvSpec, Gradients, Graph, Var};
pub use layers::{Conv2d, Linear};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::ParamSet;
pub use tensor::Tensor;
