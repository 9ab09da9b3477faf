//! Joint depth and semantic-segmentation refinement network, trained from
//! scratch on dense tensors, with evaluation metrics and a cross-modality
//! influence harness.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the 32-bit instantiations used for data files and checkpoints.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod influence;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use datagen::{NoiseConfig, Sample, SceneSpec};
pub use error::{Error, Result};
pub use influence::{InfluencePoint, Setup, SetupResult};
pub use losses::{GroundTruth, ValidMask};
pub use model::{
    build_jrn, jrn_forward, layer_shapes, param_count, FusionOp, JrnConfig, JrnNetwork, PredictionPair, Variant,
};
pub use optim::{sgd_momentum_step, OptimizerState};
pub use scalar::Scalar;
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{ConvParams, Tensor};
pub use train::{train, LossRecord, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ConvParams32 = ConvParams<f32>;
pub type Network32 = JrnNetwork<f32>;
pub type Network64 = JrnNetwork<f64>;
pub type GroundTruth32 = GroundTruth<f32>;
pub type PredictionPair32 = PredictionPair<f32>;
pub type Sample32 = Sample<f32>;
