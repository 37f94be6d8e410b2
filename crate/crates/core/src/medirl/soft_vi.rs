use serde::{Deserialize, Serialize};

use crate::env::{Action, StateId, World};
use crate::error::{CoreError, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_VI_TOL: f64 = 1e-9;
pub const DEFAULT_VI_MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backup {
    /// `V = logsumexp_a Q`, the maximum-entropy backup.
    #[default]
    Soft,
    /// `V = max_a Q`; only meant for greedy rollouts.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViOptions<'a> {
    pub gamma: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub backup: Backup,
    /// Initial values; the goal entry is ignored.
    pub warm_start: Option<&'a [f64]>,
}

impl Default for ViOptions<'_> {
    fn default() -> Self {
        ViOptions {
            gamma: DEFAULT_GAMMA,
            tol: DEFAULT_VI_TOL,
            max_iters: DEFAULT_VI_MAX_ITERS,
            backup: Backup::Soft,
            warm_start: None,
        }
    }
}

/// Values, action values and policy of one goal-conditioned MDP.
///
/// `q` and `policy` are flat over `(state, local action)` in the order of
/// [`World::transitions`]. The goal is absorbing: its only move with positive
/// probability is `ST`, with `Q = V = 0`. With `gamma = 1`, states that
/// cannot reach the goal get `V = Q = -inf` and a uniform policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution {
    pub goal: StateId,
    pub gamma: f64,
    pub backup: Backup,
    pub values: Vec<f64>,
    pub q: Vec<f64>,
    pub policy: Vec<f64>,
    offsets: Vec<usize>,
    pub iterations: usize,
    /// `max |V_new - V_old|` of every sweep.
    pub residuals: Vec<f64>,
}

impl SoftSolution {
    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    fn range(&self, s: StateId) -> std::ops::Range<usize> {
        self.offsets[s.index()]..self.offsets[s.index() + 1]
    }

    pub fn value(&self, s: StateId) -> f64 {
        self.values[s.index()]
    }

    pub fn q_row(&self, s: StateId) -> &[f64] {
        &self.q[self.range(s)]
    }

    pub fn policy_row(&self, s: StateId) -> &[f64] {
        &self.policy[self.range(s)]
    }

    /// `log pi(a|s) = Q(s,a) - V(s)`; `-inf` for invalid or zero-probability
    /// moves.
    pub fn log_prob(&self, world: &World, s: StateId, a: Action) -> f64 {
        match world.transitions(s).iter().position(|t| t.action == a) {
            Some(k) => match self.backup {
                Backup::Soft if self.values[s.index()].is_finite() => self.q_row(s)[k] - self.values[s.index()],
                Backup::Soft => self.policy_row(s)[k].ln(),
                Backup::Hard => self.policy_row(s)[k].ln(),
            },
            None => f64::NEG_INFINITY,
        }
    }

    /// Local-action index of `argmax_a Q(s,a)`, lowest action index on ties.
    pub fn greedy_index(&self, s: StateId) -> usize {
        let row = self.q_row(s);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    }
}

pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Soft value iteration to the fixed point of
/// `Q(s,a) = r(s) + gamma V(s')`, `V(s) = logsumexp_a Q(s,a)`, `V(goal) = 0`.
pub fn soft_value_iteration(
    world: &World,
    rewards: &[f64],
    goal: StateId,
    gamma: f64,
    tol: f64,
) -> Result<SoftSolution> {
    value_iteration(world, rewards, goal, &ViOptions { gamma, tol, ..Default::default() })
}

/// Hard (max) value iteration; the policy is the greedy one-hot policy.
pub fn hard_value_iteration(
    world: &World,
    rewards: &[f64],
    goal: StateId,
    gamma: f64,
    tol: f64,
) -> Result<SoftSolution> {
    value_iteration(
        world,
        rewards,
        goal,
        &ViOptions { gamma, tol, backup: Backup::Hard, ..Default::default() },
    )
}

pub fn value_iteration(world: &World, rewards: &[f64], goal: StateId, opts: &ViOptions) -> Result<SoftSolution> {
    world.check_state(goal)?;
    let n = world.num_states();
    if rewards.len() != n {
        return Err(CoreError::DimensionMismatch { expected: n, got: rewards.len() });
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(CoreError::Invalid(format!("reward of state {i} is not finite")));
    }
    if !(opts.gamma > 0.0 && opts.gamma <= 1.0) {
        return Err(CoreError::Invalid(format!("gamma must lie in (0, 1], got {}", opts.gamma)));
    }
    if !(opts.tol > 0.0) {
        return Err(CoreError::Invalid(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let gamma = opts.gamma;
    let g = goal.index();

    let mut v = match opts.warm_start {
        Some(w) if w.len() == n && w.iter().all(|x| x.is_finite()) => w.to_vec(),
        _ => vec![0.0; n],
    };
    v[g] = 0.0;
    // Without discounting, states cut off from the goal have no finite value.
    let live = if gamma < 1.0 { vec![true; n] } else { world.reachable_from(goal) };
    for (x, &l) in v.iter_mut().zip(&live) {
        if !l {
            *x = f64::NEG_INFINITY;
        }
    }
    let mut next = v.clone();
    let mut residuals = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let mut res = 0.0f64;
        for s in world.states() {
            let i = s.index();
            if i == g || !live[i] {
                continue;
            }
            let trans = world.transitions(s);
            let m = trans.iter().map(|t| v[t.next.index()]).fold(f64::NEG_INFINITY, f64::max);
            next[i] = match opts.backup {
                Backup::Soft => {
                    let sum: f64 = trans.iter().map(|t| (gamma * (v[t.next.index()] - m)).exp()).sum();
                    rewards[i] + gamma * m + sum.ln()
                }
                Backup::Hard => rewards[i] + gamma * m,
            };
            res = res.max((next[i] - v[i]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        residuals.push(res);
        if !res.is_finite() {
            break;
        }
        if res < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CoreError::NonConvergence {
            iterations: residuals.len(),
            residual: residuals.last().copied().unwrap_or(f64::NAN),
        });
    }

    let mut offsets = Vec::with_capacity(n + 1);
    let mut q = Vec::with_capacity(world.num_transitions());
    let mut policy = Vec::with_capacity(world.num_transitions());
    let mut values = vec![0.0; n];
    for s in world.states() {
        offsets.push(q.len());
        let trans = world.transitions(s);
        if !live[s.index()] {
            let k = trans.len() as f64;
            q.extend(trans.iter().map(|_| f64::NEG_INFINITY));
            policy.extend(trans.iter().map(|_| 1.0 / k));
            values[s.index()] = f64::NEG_INFINITY;
            continue;
        }
        if s == goal {
            for t in trans {
                let stay = t.action == Action::ST;
                q.push(if stay { 0.0 } else { f64::NEG_INFINITY });
                policy.push(if stay { 1.0 } else { 0.0 });
            }
            continue;
        }
        let start = q.len();
        q.extend(trans.iter().map(|t| rewards[s.index()] + gamma * v[t.next.index()]));
        let row = &q[start..];
        match opts.backup {
            Backup::Soft => {
                let lse = logsumexp(row.iter().copied());
                values[s.index()] = lse;
                policy.extend(row.iter().map(|x| (x - lse).exp()));
            }
            Backup::Hard => {
                let mut best = 0;
                for (k, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = k;
                    }
                }
                values[s.index()] = row[best];
                policy.extend((0..row.len()).map(|k| if k == best { 1.0 } else { 0.0 }));
            }
        }
    }
    offsets.push(q.len());

    Ok(SoftSolution {
        goal,
        gamma,
        backup: opts.backup,
        values,
        q,
        policy,
        offsets,
        iterations: residuals.len(),
        residuals,
    })
}
