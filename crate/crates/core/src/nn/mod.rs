//! Minimal differentiable CNN engine: conv (standard and depthwise), batch
//! normalization, ReLU, pooling, dense, softmax cross-entropy with an L1
//! penalty on BN scaling factors, and an adaptive-moment optimizer.

pub mod gradcheck;
mod graph;
mod layers;
mod loss;
mod optim;

pub use graph::{
    param_name, ForwardPass, Gradients, Mode, Network, NetworkBuilder, Node, NodeShape, Op, ParamGrad, ParamKind,
    ParamView, ParamViewMut,
};
pub use layers::{BatchNorm, Conv, ConvKind, Dense};
pub use loss::{l1_gamma, loss_with_penalty, one_hot, softmax_cross_entropy};
pub use optim::{optimizer_step, LrSchedule, OptimizerState, TrainingConfig};

#[cfg(test)]
mod tests;
