//! Fixtures shared by the benchmarks.

use velopref_core::env::{generate_synthetic_world, StateId, SynthConfig, World};
use velopref_core::rollout::{generate_experts, planted_to_rewards, sample_od_pairs, ExpertConfig};
use velopref_core::trajectory::{pad_and_mask, TrajectoryBatch};

/// A square synthetic world with its planted rewards, shifted negative.
pub fn world(side: usize, feature_dim: usize) -> (World, Vec<f64>) {
    let mut cfg = SynthConfig::one_hot(side, side, feature_dim, 0);
    cfg.blocked_fraction = 0.15;
    cfg.seed = 1;
    let (w, planted) = generate_synthetic_world(&cfg).expect("fixture world");
    let rewards = planted_to_rewards(&planted, 2.0, -5.0);
    (w, rewards)
}

/// Demonstrations over `pairs` OD pairs.
pub fn experts(world: &World, rewards: &[f64], pairs: usize, trips: usize) -> TrajectoryBatch {
    let ods = sample_od_pairs(world, pairs, 3, 7).expect("fixture OD pairs");
    let set = generate_experts(world, rewards, &ods, &ExpertConfig { trips, seed: 3, ..Default::default() })
        .expect("fixture experts");
    pad_and_mask(set.trajectories).expect("fixture batch")
}

/// The last passable state, a far corner for most worlds.
pub fn far_goal(world: &World) -> StateId {
    StateId(world.num_states() as u32 - 1)
}
