use std::collections::BTreeMap;

use crate::env::{StateId, World};
use crate::error::{CoreError, Result};
use crate::reward::{feature_matrix, GradientRecord, RewardModel};
use crate::trajectory::Trajectory;

use super::soft_vi::SoftSolution;
use super::svf::Svf;

/// Gradient of the per-trajectory mean log-likelihood plus the log prior,
/// with ascent sign: `sum_s (expert(s) - expected(s)) dR(x_s)/dtheta - lambda theta`.
pub fn maxent_gradient(
    expert: &Svf,
    expected: &Svf,
    model: &RewardModel,
    world: &World,
    lambda: f64,
) -> Result<GradientRecord> {
    let n = world.num_states();
    if expert.visits.len() != n || expected.visits.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: if expert.visits.len() != n { expert.visits.len() } else { expected.visits.len() },
        });
    }
    let upstream: Vec<f64> = expert.visits.iter().zip(&expected.visits).map(|(a, b)| a - b).collect();
    let xs = feature_matrix(world);
    let mut grad = model.backward_batch(xs.view(), &upstream)?;
    if lambda != 0.0 {
        grad.add_assign(&model.prior_gradient(lambda));
    }
    Ok(grad)
}

/// Trajectories indexed by destination state.
pub fn group_by_goal(trajs: &[Trajectory]) -> BTreeMap<StateId, Vec<usize>> {
    let mut groups: BTreeMap<StateId, Vec<usize>> = BTreeMap::new();
    for (i, t) in trajs.iter().enumerate() {
        groups.entry(t.destination()).or_default().push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct Likelihood {
    /// Sum over included trips.
    pub total: f64,
    /// Per trip; `None` for excluded trips.
    pub per_trip: Vec<Option<f64>>,
    /// Trips using a move of zero probability.
    pub excluded: Vec<usize>,
}

/// Goal-conditioned log-likelihood `sum_trips sum_t log pi(a_t | s_t)`.
///
/// `solutions` must hold a solution for every trajectory's destination.
pub fn log_likelihood(
    world: &World,
    trajs: &[Trajectory],
    solutions: &BTreeMap<StateId, SoftSolution>,
) -> Result<Likelihood> {
    let mut out = Likelihood { total: 0.0, per_trip: Vec::with_capacity(trajs.len()), excluded: Vec::new() };
    for (i, t) in trajs.iter().enumerate() {
        let sol = solutions
            .get(&t.destination())
            .ok_or_else(|| CoreError::Invalid(format!("no solution for goal {}", t.destination())))?;
        let ll: f64 = t.steps().map(|(s, a)| sol.log_prob(world, s, a)).sum();
        if ll.is_finite() {
            out.total += ll;
            out.per_trip.push(Some(ll));
        } else {
            log::warn!("trip {i} uses a zero-probability move; excluded from the likelihood");
            out.per_trip.push(None);
            out.excluded.push(i);
        }
    }
    Ok(out)
}
