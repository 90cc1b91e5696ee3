//! Knee detection on pruning curves and the skewness/knee regression.

mod kneedle;
mod stats;

pub use kneedle::{
    kneedle, kneedle_with, prune_knee, Curvature, Curve2D, Direction, KneeOptions, KneeResult, PruneKnee,
    ThresholdRule, FALLBACK_MAX_LOSS,
};
pub use stats::{linear_regression, pearson, spearman, CorrelationReport};
