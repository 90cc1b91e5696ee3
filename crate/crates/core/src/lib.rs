//! Channel-sparsity laboratory for BN-equipped CNNs.
//!
//! Trains small networks with an L1 penalty on batch-normalization scaling
//! factors, measures channel sparsity with Weight Skewness, prunes channels
//! by |γ|, locates the Prune Knee of the resulting accuracy curve with
//! Kneedle and relates the two with linear regression and Pearson r.

pub mod analysis;
pub mod arch;
pub mod error;
pub mod harness;
pub mod nn;
pub mod prune;
pub mod sparsity;
pub mod tensor;

pub use analysis::{kneedle, linear_regression, pearson, prune_knee, CorrelationReport, Curve2D, KneeResult};
pub use arch::{build_network, count_parameters, ArchSpec, Family, ParamCount};
pub use error::{Error, Result};
pub use nn::{Mode, Network, TrainingConfig};
pub use prune::{iterative_prune, prune_channels, rank_channels, ChannelRef, PruneStrategy, PruningCurve};
pub use sparsity::{collect_gammas, gamma_histogram, weight_skewness, GammaSnapshot, SparsityReport};
pub use tensor::{Scalar, Tensor};
