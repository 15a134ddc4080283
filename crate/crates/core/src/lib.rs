//! Building-segmentation networks with dual skip connections.
//!
//! The crate contains everything needed to build, train and evaluate
//! U-Net, ResUnet and U-Net3+ variants whose chosen encoder levels send two
//! skip maps to the decoder instead of one:
//!
//! * [`tensor`], [`autograd`] and [`nn`]: dense `f32` tensors, a reverse-mode
//!   tape and the layer primitives;
//! * [`arch`] and [`model`]: architecture descriptions, graph builders,
//!   parameter counting and execution;
//! * [`loss`] and [`metrics`]: focal + Dice training loss and pixel metrics;
//! * [`data`]: raster loading, tiling, splitting and batching;
//! * [`train`]: RMSProp, plateau schedule, checkpoints and the training log;
//! * [`gradcheck`]: finite-difference verification of back-propagation.

pub mod arch;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use arch::{build, ArchSpec, Block, Family, Graph, LayerKind, ParamCount, Variant};
pub use autograd::{ActivationPattern, FocalParams, Gradients, Tape, VarId};
pub use config::FlatConfig;
pub use error::{Error, Result};
pub use metrics::{Confusion, Metrics};
pub use model::{Mode, Model, ParamStore};
pub use tensor::Tensor;
pub use train::{TrainConfig, Trainer};
