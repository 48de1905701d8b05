//! Spiking neural network training with surrogate gradients.
//!
//! Dense LIF networks unrolled over `T` timesteps and trained by backpropagation through
//! time. Two training-time extensions are built in: Bernoulli masking of the surrogate
//! gradient before the optimizer step ([`msg`]) and a per-timestep weighting of the
//! readout learned from running per-timestep accuracy ([`two`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases below name
//! the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lif;
pub mod msg;
pub mod network;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod surrogate;
pub mod tensor;
pub mod train;
pub mod two;

pub use data::{Batch, Dataset, Samples, Split, SynthSpec};
pub use error::{Error, Result};
pub use lif::{LifParams, LifState};
pub use msg::MaskPlan;
pub use network::{ForwardTrace, Gradients, Input, Mode, NetworkParams, NetworkSpec};
pub use optim::{OptimizerKind, OptimizerState, OptimizerTag, Schedule};
pub use rng::{Purpose, RngStream, StreamKey};
pub use scalar::Scalar;
pub use surrogate::{SurrogateFamily, SurrogateSpec};
pub use tensor::{ElemOp, Tensor};
pub use train::{evaluate, train_epoch, EpochConfig, EpochMetrics, EvalMetrics};
pub use two::TemporalFactors;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type NetworkSpec32 = NetworkSpec<f32>;
pub type NetworkSpec64 = NetworkSpec<f64>;
pub type NetworkParams32 = NetworkParams<f32>;
pub type NetworkParams64 = NetworkParams<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
pub type OptimizerState32 = OptimizerState<f32>;
pub type OptimizerState64 = OptimizerState<f64>;
