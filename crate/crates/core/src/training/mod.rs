pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use loss::{contrastive_loss, contrastive_loss_value, round_average, round_averaged_loss};
pub use optim::{AdamW, AdamWConfig, StepOutcome};
pub use trainer::{batch_loss, dataset_loss, train, train_with_progress, BatchLoss, TrainConfig, TrainOutcome, TrainingMeta};
