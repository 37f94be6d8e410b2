//! Route-choice preference learning with maximum-entropy deep inverse
//! reinforcement learning on grid road networks.
//!
//! The pipeline: build a [`World`], turn GPS traces or rollouts into
//! [`Trajectory`] values, fit a [`RewardModel`] with [`train`], synthesize
//! trips with [`rollout()`], compare them with [`metrics`] and attribute the
//! learned reward to features with [`explain`].

pub mod env;
pub mod error;
pub mod explain;
pub mod medirl;
pub mod metrics;
pub mod reward;
pub mod rollout;
pub mod trajectory;

pub use env::{generate_synthetic_world, Action, Cell, Georef, StateId, SynthConfig, World};
pub use error::{CoreError, Result};
pub use medirl::{soft_value_iteration, train, SoftSolution, Svf, TrainConfig};
pub use reward::{GradientRecord, RewardModel};
pub use rollout::{rollout, shortest_path, RolloutConfig, RolloutMode};
pub use trajectory::{to_trajectory, Trajectory, TrajectoryBatch};
