//! The Q-value network, its loss and optimiser.

mod arch;
mod loss;
mod net;
mod optim;
mod params;
mod scalar;
mod window;

pub use arch::{InputNorm, NetArchitecture, Variant};
pub use loss::{loss_and_grads, td_target, td_targets};
pub use net::{
    forward_memoryless, forward_memoryless_batch, forward_stateful, forward_stateful_traced, q_values, q_values_batch,
    ActionValues, EmbeddingCache,
};
pub use optim::{adam_step, hard_update, soft_update, AdamConfig, OptState, SnapshotQueue};
pub use params::{init_params, GradStore, ParamStore, ParamTensor};
pub use scalar::Scalar;
pub use window::{HistoryWindow, PastEntry};
