//! Maximum-entropy deep IRL: goal-conditioned soft value iteration,
//! visitation frequencies, the likelihood gradient and the training loop.

mod objective;
mod soft_vi;
mod svf;
mod train;

pub use objective::{group_by_goal, log_likelihood, maxent_gradient, Likelihood};
pub use soft_vi::{
    hard_value_iteration, soft_value_iteration, value_iteration, Backup, SoftSolution, ViOptions, DEFAULT_GAMMA,
    DEFAULT_VI_MAX_ITERS, DEFAULT_VI_TOL,
};
pub use svf::{expected_svf, expert_svf, forward_distributions, propagate, Svf};
pub use train::{evaluate, train, train_from, write_history_csv, EpochRecord, Evaluation, TrainConfig, TrainOutcome};
