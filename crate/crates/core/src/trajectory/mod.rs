//! Demonstration and synthetic trajectories: ingestion, filtering, map
//! matching, batching and trip statistics.

mod filter;
mod mapmatch;
mod raw;
pub(crate) mod stats;

pub use filter::{filter_trips, FilterOutcome, FilterReport, FilterRules, MatchedTrip, RejectReason, TripView};
pub use mapmatch::{hmm_map_match, match_raw_trip, MatchParams, MatchResult};
pub use raw::{parse_trips, parse_trips_str, GpsPoint, ParseReport, RawTrip, RecordError, TripFormat};
pub use stats::{period_label, trip_stats, LabelSummary, TripDistance, TripStats};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::env::{Action, StateId, World};
use crate::error::{CoreError, Result};

/// A state sequence with the actions connecting consecutive states.
///
/// `states` has one more entry than `actions`; the steps of the trajectory
/// are the `(states[t], actions[t])` pairs and the final state is the
/// destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    states: Vec<StateId>,
    actions: Vec<Action>,
    pub order_id: Option<String>,
    pub label: Option<String>,
}

impl Trajectory {
    /// Validates step consistency against `world`.
    pub fn new(world: &World, states: Vec<StateId>, actions: Vec<Action>) -> Result<Trajectory> {
        if states.is_empty() {
            return Err(CoreError::Empty("trajectory states"));
        }
        if actions.len() + 1 != states.len() {
            return Err(CoreError::Invalid(format!(
                "trajectory with {} states needs {} actions, got {}",
                states.len(),
                states.len() - 1,
                actions.len()
            )));
        }
        for &s in &states {
            world.check_state(s)?;
        }
        for (t, &a) in actions.iter().enumerate() {
            let next = world.step(states[t], a)?;
            if next != states[t + 1] {
                return Err(CoreError::Invalid(format!(
                    "action {a} at step {t} leads to {next}, trajectory records {}",
                    states[t + 1]
                )));
            }
        }
        Ok(Trajectory { states, actions, order_id: None, label: None })
    }

    pub fn with_order_id(mut self, id: impl Into<String>) -> Self {
        self.order_id = Some(id.into());
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn origin(&self) -> StateId {
        self.states[0]
    }

    pub fn destination(&self) -> StateId {
        *self.states.last().expect("non-empty")
    }

    pub fn od(&self) -> (StateId, StateId) {
        (self.origin(), self.destination())
    }

    /// Number of `(state, action)` steps.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = (StateId, Action)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }

    /// Distinct cells visited, destination included.
    pub fn cell_set(&self) -> BTreeSet<StateId> {
        self.states.iter().copied().collect()
    }

    /// Distinct cells traversed; stands in for the road-segment count.
    pub fn segment_count(&self) -> usize {
        self.cell_set().len()
    }

    /// Geometric path length in meters (stay steps contribute nothing).
    pub fn length_m(&self, world: &World) -> f64 {
        self.actions.iter().map(|a| a.length()).sum::<f64>() * world.cell_size()
    }
}

/// Converts a map-matched cell sequence to a trajectory, inferring each action
/// from the geometric offset. Repeated cells become `ST` steps.
pub fn to_trajectory(cells: &[StateId], world: &World) -> Result<Trajectory> {
    if cells.is_empty() {
        return Err(CoreError::Empty("cell sequence"));
    }
    for &c in cells {
        world.check_state(c)?;
    }
    let actions = cells
        .windows(2)
        .map(|w| world.action_between(w[0], w[1]).ok_or(CoreError::NotAdjacent { from: w[0], to: w[1] }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { states: cells.to_vec(), actions, order_id: None, label: None })
}

/// Zero-padded batch of trajectories. Padded slots hold state 0 and are
/// masked out; their feature rows are all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    trajectories: Vec<Trajectory>,
    max_len: usize,
    padded: Vec<StateId>,
    mask: Vec<bool>,
}

pub fn pad_and_mask(trajs: Vec<Trajectory>) -> Result<TrajectoryBatch> {
    if trajs.is_empty() {
        return Err(CoreError::Empty("trajectory batch"));
    }
    let max_len = trajs.iter().map(Trajectory::len).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(trajs.len() * max_len);
    let mut mask = Vec::with_capacity(trajs.len() * max_len);
    for t in &trajs {
        for i in 0..max_len {
            if i < t.len() {
                padded.push(t.states[i]);
                mask.push(true);
            } else {
                padded.push(StateId(0));
                mask.push(false);
            }
        }
    }
    Ok(TrajectoryBatch { trajectories: trajs, max_len, padded, mask })
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn padded_states(&self, i: usize) -> &[StateId] {
        &self.padded[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.max_len..(i + 1) * self.max_len]
    }

    /// `[trajectory][step][feature]`, zero rows at masked slots.
    pub fn padded_features(&self, world: &World) -> Vec<Vec<Vec<f64>>> {
        (0..self.len())
            .map(|i| {
                self.padded_states(i)
                    .iter()
                    .zip(self.mask(i))
                    .map(|(&s, &m)| {
                        if m {
                            world.features(s).to_vec()
                        } else {
                            vec![0.0; world.feature_dim()]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Serialized trajectory: cells are row-major cell indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub od: [usize; 2],
    pub cells: Vec<usize>,
    pub actions: Vec<Action>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory, world: &World) -> Self {
        TrajectoryRecord {
            order_id: t.order_id.clone(),
            label: t.label.clone(),
            od: [world.cell_index(t.origin()), world.cell_index(t.destination())],
            cells: t.states.iter().map(|&s| world.cell_index(s)).collect(),
            actions: t.actions.clone(),
        }
    }

    pub fn into_trajectory(self, world: &World) -> Result<Trajectory> {
        let states = self
            .cells
            .iter()
            .map(|&c| world.state_at_index(c))
            .collect::<Result<Vec<_>>>()?;
        let mut t = Trajectory::new(world, states, self.actions)?;
        if [world.cell_index(t.origin()), world.cell_index(t.destination())] != self.od {
            return Err(CoreError::Invalid(format!(
                "od {:?} disagrees with the cell list",
                self.od
            )));
        }
        t.order_id = self.order_id;
        t.label = self.label;
        Ok(t)
    }
}

pub fn trajectories_to_json(trajs: &[Trajectory], world: &World) -> Result<String> {
    let recs: Vec<TrajectoryRecord> = trajs
        .iter()
        .map(|t| TrajectoryRecord::from_trajectory(t, world))
        .collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn trajectories_from_json(s: &str, world: &World) -> Result<Vec<Trajectory>> {
    let recs: Vec<TrajectoryRecord> = serde_json::from_str(s)?;
    recs.into_iter().map(|r| r.into_trajectory(world)).collect()
}
