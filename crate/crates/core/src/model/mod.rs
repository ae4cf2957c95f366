//! Local models `f_i(θ_i; x)`, losses, and the centralized baseline.

mod centralized;
mod checkpoint;
mod local;
mod loss;

pub use centralized::{
    centralized_train, shuffled_batches, BlockModel, CentralizedConfig, CentralizedTrainer, EpochLoss,
};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use local::{LocalModel, ModelKind};
pub use loss::{loss_and_grad, LossKind, LossSpec, Regularizer, RowLoss};
