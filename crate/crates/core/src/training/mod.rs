//! Matching, losses and the training loop.

mod hungarian;
mod losses;
mod objective;
mod trainer;

pub use hungarian::{hungarian_match, MatchResult};
pub use losses::{focal_grad, focal_loss, giou_1d, giou_1d_grad, FOCAL_EPS};
pub use objective::{compute_losses, matching_cost, CostWeights, FocalParams, LossBreakdown, LossWeights, Objective};
pub use trainer::{evaluate_loss, train_model, video_objective, TrainOptions};
