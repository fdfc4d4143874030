//! Losses, ground-truth labelling, optimisation and the toy training loop.

pub mod labels;
pub mod losses;
pub mod optim;
pub mod reid;
pub mod train;

pub use labels::{greedy_identity_assignment, GtPerson};
pub use losses::{ce_label_smooth, center_loss, loss_attn, loss_match, total_loss, triplet_loss};
pub use optim::{AdamWConfig, OptimState};
pub use train::{dataset_loss, train_model, train_toy, LossRecord, TrainOptions, TrainOutcome};
