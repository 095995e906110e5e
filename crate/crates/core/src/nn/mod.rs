//! MLP building blocks, partition-labelled parameter storage, and Adam.

mod adam;
mod mlp;
mod params;
mod partition;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{ActivationKind, DualHead, DualHeadSpec, Mlp, MlpSpec};
pub use params::{Param, ParamId, ParamStore, Partition};
pub use partition::{collect_grads, masked_backward, LossTerm};
