use crate::env::{StateId, World};
use crate::error::{CoreError, Result};
use crate::trajectory::TrajectoryBatch;

use super::soft_vi::SoftSolution;

/// State visitation frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Svf {
    pub visits: Vec<f64>,
    pub horizon: usize,
}

impl Svf {
    pub fn zeros(n: usize, horizon: usize) -> Svf {
        Svf { visits: vec![0.0; n], horizon }
    }

    pub fn total(&self) -> f64 {
        self.visits.iter().sum()
    }

    /// Copy without the mass sitting in `goal` (absorbed mass; the goal never
    /// takes a decision).
    pub fn transient(&self, goal: StateId) -> Svf {
        let mut out = self.clone();
        out.visits[goal.index()] = 0.0;
        out
    }

    pub fn add_scaled(&mut self, other: &Svf, k: f64) {
        for (a, b) in self.visits.iter_mut().zip(&other.visits) {
            *a += k * b;
        }
        self.horizon = self.horizon.max(other.horizon);
    }
}

/// One forward step `D_{t+1}(s') = sum_s sum_a D_t(s) pi(a|s) [step(s,a) = s']`.
/// The goal's policy is a certain stay, so absorbed mass remains there.
pub fn propagate(world: &World, solution: &SoftSolution, d: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for s in world.states() {
        let mass = d[s.index()];
        if mass == 0.0 {
            continue;
        }
        for (t, &p) in world.transitions(s).iter().zip(solution.policy_row(s)) {
            out[t.next.index()] += mass * p;
        }
    }
}

/// `D_0 .. D_{horizon-1}`.
pub fn forward_distributions(
    world: &World,
    solution: &SoftSolution,
    origin_dist: &[f64],
    horizon: usize,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(horizon);
    if horizon == 0 {
        return out;
    }
    out.push(origin_dist.to_vec());
    let mut next = vec![0.0; origin_dist.len()];
    for _ in 1..horizon {
        propagate(world, solution, out.last().expect("non-empty"), &mut next);
        out.push(next.clone());
    }
    out
}

/// Expected SVF `sum_{t < horizon} D_t` by forward dynamic programming.
///
/// `origin_dist` is usually a probability vector; any nonnegative mass is
/// propagated linearly, which lets callers seed one unit per trip.
pub fn expected_svf(world: &World, solution: &SoftSolution, origin_dist: &[f64], horizon: usize) -> Result<Svf> {
    let n = world.num_states();
    if origin_dist.len() != n {
        return Err(CoreError::DimensionMismatch { expected: n, got: origin_dist.len() });
    }
    if horizon == 0 {
        return Err(CoreError::Invalid("horizon must be at least 1".into()));
    }
    if origin_dist.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(CoreError::Invalid("origin distribution must be nonnegative and finite".into()));
    }
    let mut visits = origin_dist.to_vec();
    let mut d = origin_dist.to_vec();
    let mut next = vec![0.0; n];
    for _ in 1..horizon {
        propagate(world, solution, &d, &mut next);
        std::mem::swap(&mut d, &mut next);
        for (v, x) in visits.iter_mut().zip(&d) {
            *v += x;
        }
    }
    Ok(Svf { visits, horizon })
}

/// Demonstrated SVF: real steps per state divided by the number of
/// trajectories. Padded slots are masked out.
pub fn expert_svf(batch: &TrajectoryBatch, world: &World) -> Result<Svf> {
    let mut visits = vec![0.0; world.num_states()];
    for i in 0..batch.len() {
        for (&s, &real) in batch.padded_states(i).iter().zip(batch.mask(i)) {
            if real {
                world.check_state(s)?;
                visits[s.index()] += 1.0;
            }
        }
    }
    let n = batch.len().max(1) as f64;
    visits.iter_mut().for_each(|v| *v /= n);
    Ok(Svf { visits, horizon: batch.max_len() })
}
