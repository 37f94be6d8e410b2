//! Synthetic trajectories from a solved policy, and shortest-path baselines.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{StateId, World};
use crate::error::{CoreError, Result};
use crate::medirl::SoftSolution;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Stochastic,
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { mode: RolloutMode::Greedy, max_steps: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Reached,
    /// Stopped at `max_steps` without reaching the goal.
    Truncated,
    /// Origin was the goal; the trajectory has no steps.
    AtGoal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub goal: StateId,
    pub status: RolloutStatus,
}

impl Rollout {
    pub fn terminated(&self) -> bool {
        self.status != RolloutStatus::Truncated
    }
}

/// Random stream for rollout number `index` under `seed`; independent of
/// scheduling, so parallel and serial runs agree.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Follows `solution`'s policy from `origin` until the goal or `max_steps`.
pub fn rollout(world: &World, solution: &SoftSolution, origin: StateId, config: &RolloutConfig) -> Result<Rollout> {
    rollout_with(world, solution, origin, config, &mut rollout_rng(config.seed, 0))
}

pub fn rollout_with<R: Rng>(
    world: &World,
    solution: &SoftSolution,
    origin: StateId,
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<Rollout> {
    world.check_state(origin)?;
    world.check_state(solution.goal)?;
    if config.max_steps == 0 {
        return Err(CoreError::Invalid("max_steps must be at least 1".into()));
    }
    let goal = solution.goal;
    let mut states = vec![origin];
    let mut actions = Vec::new();
    let mut s = origin;
    while s != goal && actions.len() < config.max_steps {
        let trans = world.transitions(s);
        let k = match config.mode {
            RolloutMode::Greedy => solution.greedy_index(s),
            RolloutMode::Stochastic => sample(solution.policy_row(s), rng),
        };
        actions.push(trans[k].action);
        s = trans[k].next;
        states.push(s);
    }
    let status = if origin == goal {
        RolloutStatus::AtGoal
    } else if s == goal {
        RolloutStatus::Reached
    } else {
        RolloutStatus::Truncated
    };
    Ok(Rollout { trajectory: Trajectory::new(world, states, actions)?, goal, status })
}

fn sample<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// One rollout per OD pair; pair `i` draws from stream `i`.
pub fn rollout_batch(
    world: &World,
    solutions: &BTreeMap<StateId, SoftSolution>,
    ods: &[(StateId, StateId)],
    config: &RolloutConfig,
) -> Result<Vec<Rollout>> {
    ods.par_iter()
        .enumerate()
        .map(|(i, &(o, g))| {
            let sol = solutions
                .get(&g)
                .ok_or_else(|| CoreError::Invalid(format!("no solution for goal {g}")))?;
            rollout_with(world, sol, o, config, &mut rollout_rng(config.seed, i as u64))
        })
        .collect()
}

/// Maps a planted reward in `[0, 1]` to `scale * planted + offset`.
pub fn planted_to_rewards(planted: &[f64], scale: f64, offset: f64) -> Vec<f64> {
    planted.iter().map(|p| scale * p + offset).collect()
}

/// `count` distinct OD pairs with origin and goal at least `min_cells` apart
/// (Chebyshev) and mutually reachable.
pub fn sample_od_pairs(world: &World, count: usize, min_cells: usize, seed: u64) -> Result<Vec<(StateId, StateId)>> {
    let n = world.num_states();
    if n < 2 && count > 0 {
        return Err(CoreError::Invalid("OD sampling needs at least 2 states".into()));
    }
    let mut rng = rollout_rng(seed, u64::MAX - 1);
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    let mut reach: BTreeMap<StateId, Vec<bool>> = BTreeMap::new();
    let budget = 1000 * count.max(1);
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let o = StateId(rng.gen_range(0..n) as u32);
        let g = StateId(rng.gen_range(0..n) as u32);
        if o == g || world.cell(o).chebyshev(world.cell(g)) < min_cells || seen.contains(&(o, g)) {
            continue;
        }
        if !reach.entry(o).or_insert_with(|| world.reachable_from(o))[g.index()] {
            continue;
        }
        seen.insert((o, g));
        out.push((o, g));
    }
    if out.len() < count {
        return Err(CoreError::Invalid(format!(
            "found only {} of {count} OD pairs at least {min_cells} cells apart",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub trips: usize,
    pub gamma: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { trips: 2000, gamma: crate::medirl::DEFAULT_GAMMA, max_steps: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    pub trajectories: Vec<Trajectory>,
    /// Rollouts dropped because they hit `max_steps`.
    pub truncated: usize,
}

/// Soft-optimal demonstrations under `rewards`: trip `k` uses OD pair
/// `k % ods.len()` and random stream `k`.
pub fn generate_experts(
    world: &World,
    rewards: &[f64],
    ods: &[(StateId, StateId)],
    config: &ExpertConfig,
) -> Result<ExpertSet> {
    if config.trips == 0 {
        log::warn!("no expert trips requested");
        return Ok(ExpertSet { trajectories: Vec::new(), truncated: 0 });
    }
    if ods.is_empty() {
        return Err(CoreError::Empty("OD pairs"));
    }
    let goals: std::collections::BTreeSet<StateId> = ods.iter().map(|&(_, g)| g).collect();
    let solutions = solve_goals(world, rewards, goals, config.gamma)?;
    let rcfg = RolloutConfig { mode: RolloutMode::Stochastic, max_steps: config.max_steps, seed: config.seed };
    let trip_ods: Vec<(StateId, StateId)> = (0..config.trips).map(|k| ods[k % ods.len()]).collect();
    let rollouts = rollout_batch(world, &solutions, &trip_ods, &rcfg)?;
    let truncated = rollouts.iter().filter(|r| !r.terminated()).count();
    if truncated > 0 {
        log::warn!("{truncated} expert rollouts hit max_steps and were dropped");
    }
    let trajectories = rollouts.into_iter().filter(Rollout::terminated).map(|r| r.trajectory).collect();
    Ok(ExpertSet { trajectories, truncated })
}

/// Soft solutions for each goal, solved in parallel.
pub fn solve_goals(
    world: &World,
    rewards: &[f64],
    goals: impl IntoIterator<Item = StateId>,
    gamma: f64,
) -> Result<BTreeMap<StateId, SoftSolution>> {
    let goals: Vec<StateId> = goals.into_iter().collect();
    goals
        .par_iter()
        .map(|&g| Ok((g, crate::medirl::soft_value_iteration(world, rewards, g, gamma, crate::medirl::DEFAULT_VI_TOL)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    state: StateId,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then on state index.
        other.dist.total_cmp(&self.dist).then_with(|| other.state.cmp(&self.state))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const TIE_EPS: f64 = 1e-9;

fn dijkstra(world: &World, origin: StateId, target: Option<StateId>) -> (Vec<f64>, Vec<Option<StateId>>) {
    let n = world.num_states();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<StateId>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[origin.index()] = 0.0;
    heap.push(Entry { dist: 0.0, state: origin });
    while let Some(Entry { dist: d, state: u }) = heap.pop() {
        if done[u.index()] {
            continue;
        }
        done[u.index()] = true;
        if Some(u) == target {
            break;
        }
        for t in world.transitions(u) {
            let v = t.next;
            if v == u || done[v.index()] {
                continue;
            }
            let nd = d + t.action.length() * world.cell_size();
            let tol = TIE_EPS * world.cell_size();
            let cur = dist[v.index()];
            if nd < cur - tol {
                dist[v.index()] = nd;
                pred[v.index()] = Some(u);
                heap.push(Entry { dist: nd, state: v });
            } else if (nd - cur).abs() <= tol && pred[v.index()].is_some_and(|p| u < p) {
                pred[v.index()] = Some(u);
            }
        }
    }
    (dist, pred)
}

/// Network distance in meters from `origin` to every state; infinite where
/// unreachable.
pub fn geodesic_distances(world: &World, origin: StateId) -> Vec<f64> {
    dijkstra(world, origin, None).0
}

/// Minimum-length path; among equal-length paths each cell's predecessor is
/// the one with the lowest cell index.
pub fn shortest_path(world: &World, origin: StateId, goal: StateId) -> Result<Trajectory> {
    world.check_state(origin)?;
    world.check_state(goal)?;
    let (dist, pred) = dijkstra(world, origin, Some(goal));
    if !dist[goal.index()].is_finite() {
        return Err(CoreError::Unreachable { origin, goal });
    }
    let mut cells = vec![goal];
    let mut s = goal;
    while let Some(p) = pred[s.index()] {
        cells.push(p);
        s = p;
    }
    cells.reverse();
    crate::trajectory::to_trajectory(&cells, world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, Cell};
    use crate::medirl::{expected_svf, hard_value_iteration, soft_value_iteration};

    #[test]
    fn next_to_goal_is_one_step() {
        let w = World::open(1, 2, vec![vec![0.0]; 2]).unwrap();
        let sol = soft_value_iteration(&w, &[-40.0, -40.0], StateId(1), 1.0, 1e-12).unwrap();
        let cfg = RolloutConfig { mode: RolloutMode::Stochastic, ..Default::default() };
        let r = rollout(&w, &sol, StateId(0), &cfg).unwrap();
        assert_eq!(r.trajectory.states(), &[StateId(0), StateId(1)]);
        assert_eq!(r.status, RolloutStatus::Reached);
    }

    #[test]
    fn origin_at_goal_is_flagged() {
        let w = World::open(1, 2, vec![vec![0.0]; 2]).unwrap();
        let sol = soft_value_iteration(&w, &[-1.0, -1.0], StateId(1), 0.99, 1e-12).unwrap();
        let r = rollout(&w, &sol, StateId(1), &RolloutConfig::default()).unwrap();
        assert_eq!(r.status, RolloutStatus::AtGoal);
        assert!(r.trajectory.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let w = World::open(4, 4, vec![vec![0.0]; 16]).unwrap();
        let r: Vec<f64> = (0..16).map(|i| -0.2 - 0.05 * i as f64).collect();
        let sol = soft_value_iteration(&w, &r, StateId(15), 0.99, 1e-10).unwrap();
        for mode in [RolloutMode::Greedy, RolloutMode::Stochastic] {
            let cfg = RolloutConfig { mode, seed: 9, max_steps: 200 };
            let a = rollout(&w, &sol, StateId(0), &cfg).unwrap();
            let b = rollout(&w, &sol, StateId(0), &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let w = World::open(1, 5, vec![vec![0.0]; 5]).unwrap();
        let sol = hard_value_iteration(&w, &[-1.0; 5], StateId(4), 0.99, 1e-12).unwrap();
        let r = rollout(&w, &sol, StateId(0), &RolloutConfig { max_steps: 2, ..Default::default() }).unwrap();
        assert_eq!(r.status, RolloutStatus::Truncated);
        assert_eq!(r.trajectory.len(), 2);
        assert!(!r.terminated());
    }

    #[test]
    fn monte_carlo_matches_forward_pass() {
        let w = World::open(1, 4, vec![vec![0.0]; 4]).unwrap();
        let rewards = [-0.5, -0.9, -0.7, -1.0];
        let goal = StateId(3);
        let sol = soft_value_iteration(&w, &rewards, goal, 0.99, 1e-12).unwrap();
        let horizon = 12;
        let mut origin = vec![0.0; 4];
        origin[0] = 1.0;
        let exact = expected_svf(&w, &sol, &origin, horizon).unwrap();
        let cfg = RolloutConfig { mode: RolloutMode::Stochastic, max_steps: horizon - 1, seed: 3 };
        let runs = 100_000;
        let mut counts = [0.0; 4];
        let mut rng = rollout_rng(cfg.seed, 0);
        for _ in 0..runs {
            let r = rollout_with(&w, &sol, StateId(0), &cfg, &mut rng).unwrap();
            for s in r.trajectory.states() {
                counts[s.index()] += 1.0;
            }
            // Absorbed mass keeps counting at the goal until the horizon.
            counts[goal.index()] += (horizon - r.trajectory.states().len()) as f64;
        }
        let l1: f64 = (0..4).map(|i| (counts[i] / runs as f64 - exact.visits[i]).abs()).sum::<f64>() / horizon as f64;
        assert!(l1 < 0.02, "l1 {l1}");
    }

    #[test]
    fn corridor_and_diagonal() {
        let w = World::open(1, 5, vec![vec![0.0]; 5]).unwrap();
        let p = shortest_path(&w, StateId(0), StateId(4)).unwrap();
        assert_eq!(p.states(), &[StateId(0), StateId(1), StateId(2), StateId(3), StateId(4)]);

        let w = World::open(3, 3, vec![vec![0.0]; 9]).unwrap();
        let p = shortest_path(&w, StateId(0), StateId(8)).unwrap();
        assert_eq!(p.actions(), &[Action::BR, Action::BR]);
        assert!((p.length_m(&w) - 2.0 * 2f64.sqrt() * 100.0).abs() < 1e-9);
    }

    #[test]
    fn disconnected_goal_is_unreachable() {
        // Column 1 is blocked on both rows, splitting the world.
        let w = World::build(2, 3, &[1, 4], vec![vec![0.0]; 4]).unwrap();
        let a = w.state_at(Cell::new(0, 0)).unwrap();
        let b = w.state_at(Cell::new(0, 2)).unwrap();
        assert!(matches!(shortest_path(&w, a, b), Err(CoreError::Unreachable { .. })));
        assert!(geodesic_distances(&w, a)[b.index()].is_infinite());
    }

    #[test]
    fn ties_prefer_low_cell_index() {
        // From (0,0) to (1,2): R then BR, or BR then R; equal length.
        let w = World::open(2, 3, vec![vec![0.0]; 6]).unwrap();
        let p = shortest_path(&w, StateId(0), StateId(5)).unwrap();
        assert_eq!(p.states(), &[StateId(0), StateId(1), StateId(5)]);
    }
}
