//! Target assignment, losses, the optimizer and the recurrent training cycle.

mod losses;
mod optim;
mod targets;
mod trainer;
mod transfer;

pub use losses::{aux_loss, focal_loss, huber, huber_loss, regression_losses, PROB_EPS};
pub use optim::{bias_init, class_weights, AdamW, LrSchedule, OptimConfig};
pub use targets::{build_targets, TargetMaps, REG_WIDTH};
pub use trainer::{
    class_frequencies, compute_losses, LossBreakdown, LossConfig, TrainConfig, Trainer,
};
pub use transfer::{transfer_weights, TransferReport, FROZEN_PREFIXES};
