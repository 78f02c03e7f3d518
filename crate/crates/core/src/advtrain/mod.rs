//! Embedding-level adversarial training: per-example text perturbations found
//! by projected normalized-gradient ascent, the clean / perturbed /
//! consistency losses, alternating min-max updates, and an evaluation attack.

mod attack;
mod config;
mod inner;
mod losses;
mod train;

pub use attack::{attack_eval, AttackReport};
pub use config::{AdvConfig, OptimConfig, TrainMode};
pub use inner::{ascend, init_deltas, inner_maximize, max_column_norm, project_columns};
pub use losses::{jsd, losses, objective, LossBreakdown};
pub use train::{loss_gradients, train_step, Adam, EpochSummary, MetricsLog, Schedule, StepRecord, Trainer};

#[cfg(test)]
mod tests;
