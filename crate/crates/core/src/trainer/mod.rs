//! SGD training with gradient clipping, weight decay, plateau annealing and
//! checkpointing.

mod checkpoint;
mod config;
mod epoch;
mod metrics;
mod optim;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DType, StoredTensor, FORMAT_VERSION, MAGIC};
pub use config::{TrainConfig, DEFAULT_SEED};
pub use epoch::{
    activation_stats, evaluate_batched, evaluate_perplexity, run_epoch, slice_gradients, train, train_from,
    ActivationStats, EpochReport, SliceGradients, TrainOutcome,
};
pub use metrics::{MetricsLog, MetricsRecord};
pub use optim::{clip_gradients, global_norm, sgd_step};
pub use state::{anneal_on_plateau, EpochRecord, TrainState};
