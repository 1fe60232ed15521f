//! Losses, optimizer, learning-rate schedule and the training loop.

mod batching;
mod checkpoint;
mod loss;
mod optim;
mod state;
mod trainer;

pub use batching::{word_batches, BatchStream};
pub use checkpoint::{Checkpoint, CheckpointMeta, Translations, BEST_PARAMS, CONFIG_FILE};
pub use loss::{
    combined_loss, exact_seq_kd_loss, nll_loss, word_kd_loss, SeqKdLoss, TokenLoss,
    ENUMERATION_LIMIT,
};
pub use optim::{adam_update, clip_gradients, AdamConfig, AdamState};
pub use state::{lr_schedule_step, BestCheckpoint, ScheduleEvent, TrainState};
pub use trainer::{
    encode_pairs, metrics_tsv, perplexity, train_loop, MetricsRow, TrainConfig, TrainOutcome,
    METRICS_HEADER,
};
