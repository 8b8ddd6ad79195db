//! Training harness: centre-based target assignment, BCE + CIoU loss, SGD
//! with momentum, checkpoints and the seeded training loop.

mod assign;
mod checkpoint;
mod loss;
mod run;
mod sgd;

pub use assign::{assign_targets, select_level, LevelGeometry, Positive};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{ciou_map, compute_loss, Loss, LossBreakdown, LossWeights};
pub use run::{
    batch_gradients, check_layout, evaluate, head_geometry, log_csv, predict_samples, stack_batch, train, TrainConfig,
    TrainLogRow, TrainOutcome,
};
pub use sgd::Sgd;
