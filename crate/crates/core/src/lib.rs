//! Feedforward network training with layer-wise learning-rate factors derived
//! from approximate back-matching propagation.
//!
//! Layouts: vector activations are `[features, batch]`, images are
//! `[batch, channels, height, width]`, logits are `[classes, batch]`.
//! Weight gradients are derivatives of the mean mini-batch loss.

pub mod backmatch;
pub mod data;
pub mod error;
pub mod layers;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use backmatch::{
    apply_backmatch_scaling, exact_backmatch_conv, exact_backmatch_fc, factor_walk, layer_ratio,
    row_mean_sq_norm, ExactBackmatchResult, FactorState, FactorStep, LayerFactorInfo,
};
pub use data::{BatchPlan, CifarVariant, Dataset};
pub use error::{Error, Result};
pub use layers::Layer;
pub use network::{ArchSpec, BackwardBundle, LayerSpec, Network, ParamGrad, Preset};
pub use optim::{OptimizerConfig, Rule, Schedule};
pub use tensor::{ConvGeometry, Matrix, Tensor};
pub use trainer::{MetricsRow, TrainConfig, TrainData, TrainOutcome};
