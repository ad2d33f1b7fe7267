//! The two-pass likelihood objective, the optimizer, checkpointing, and the
//! training loop.

mod adam;
mod checkpoint;
mod loss;
mod runner;

pub use adam::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{loss_two_pass, nll_sum, per_token, TwoPassLoss};
pub use runner::{
    prepare_examples, split_train_val, train, StepRecord, TrainConfig, TrainOutcome,
};
