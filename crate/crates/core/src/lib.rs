//! Conditional adapter layers with a learned soft top-k token router.
//!
//! Only `k` of `n` tokens pass through the heavy (frozen) attention and
//! feed-forward branch; a light adapter processes every token. The router
//! scores tokens and relaxes top-k selection with an entropy-regularized
//! dual iteration that stays differentiable.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod layer;
pub mod router;
pub mod soft_topk;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{CodaError, Result};
pub use flops::{count_flops, BranchFlops, FlopsReport};
pub use layer::{
    AdapterKind, AdapterWeights, AttentionVariant, Capacity, CodaConfig, CodaLayerParams, FrozenLayerWeights,
    LayerOutput, TrainableLayerParams,
};
pub use router::{RouterParams, RouterVariant, SelectionResult};
pub use soft_topk::{EpsSchedule, ScoreVector, SoftTopkResult};
pub use tensor::{Matrix, Rng};
pub use training::{AnnealSchedule, Encoder, SyntheticTask, TrainConfig};
