//! The unit decoder: an image-unit prefix followed by BOS and
//! autoregressively predicted output tokens, in one pre-norm transformer
//! stack.
//!
//! The same network serves two tasks. [`Task::Text`] predicts caption words
//! and is used for pretraining; [`Task::Units`] predicts speech units.
//! [`init_transfer`] turns a text model into a unit model by keeping the
//! transformer and image-side weights and replacing only the output
//! vocabulary layers.

mod checkpoint;
mod config;
mod forward;
mod generate;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModelConfig, Specials, Task, TrainHyper, NUM_SPECIALS};
pub use forward::{
    batch_loss, forward_loss, loss_and_grads, next_token_log_probs, teacher_forced_accuracy,
    Example,
};
pub use generate::{generate, greedy, Generation};
pub use params::{
    check_shapes, init_random, init_transfer, BlockParams, ModelParams, ParamSet, Tensor,
    IMAGE_PATH,
};
pub use train::{pretrain_text, trace_to_text, train, train_until, StepLog, TrainOutcome};
