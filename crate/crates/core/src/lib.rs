//! Multi-task prediction-and-distillation network for joint monocular depth
//! estimation and scene parsing, on a small from-scratch autodiff engine.
//!
//! Tensors are `f64` NCHW. A forward pass records onto a [`Tape`]; parameters
//! live in a [`ParamStore`] and are bound onto each tape by name.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::{DistillVariant, ExperimentConfig, FinalTask, LossWeights, NetworkConfig, Task, TrainConfig};
pub use data::{LabelMap, Sample, SceneConfig};
pub use error::{Error, Result};
pub use kernels::ConvSpec;
pub use metrics::{DepthMetrics, MetricsRow, ParsingMetrics, RelDenominator};
pub use optim::Sgd;
pub use params::ParamStore;
pub use tensor::{Shape4, Tensor4};
