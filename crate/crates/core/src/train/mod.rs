//! Training with clip-level labels: weak labels are replicated over
//! every frame as strong targets, and the two head losses are combined
//! with per-head weights.

mod fit;
mod labels;
mod sweep;

pub use fit::{
    fit, training_metric, write_history_csv, EarlyStopping, EpochReport, FitOutcome, TrainConfig,
};
pub use labels::{combined_loss, replicate_weak_to_strong, weak_from_strong, CombinedLoss};
pub use sweep::{default_weight_pairs, weight_sweep, write_sweep_csv, SweepRow};
