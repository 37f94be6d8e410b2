//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here is deliberately naive: exhaustive enumeration over paths,
//! action sequences or candidate assignments, with no reuse of the library's
//! dynamic programming.

#![allow(dead_code)]

use rand::Rng;
use velopref_core::env::{StateId, World};
use velopref_core::medirl::SoftSolution;

/// Random world of `rows x cols` with some blocked cells, at least one
/// passable, features uniform in `[0, 1]`.
pub fn random_world<R: Rng>(rng: &mut R, rows: usize, cols: usize, d: usize, block_p: f64) -> World {
    loop {
        let blocked: Vec<usize> = (0..rows * cols).filter(|_| rng.gen::<f64>() < block_p).collect();
        let n = rows * cols - blocked.len();
        if n == 0 {
            continue;
        }
        let feats = (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
        return World::build(rows, cols, &blocked, feats).expect("valid random world");
    }
}

/// Every state sequence from `origin` that first reaches `goal` within
/// `max_steps` moves.
pub fn goal_paths(world: &World, origin: StateId, goal: StateId, max_steps: usize) -> Vec<Vec<StateId>> {
    fn walk(world: &World, goal: StateId, left: usize, path: &mut Vec<StateId>, out: &mut Vec<Vec<StateId>>) {
        let s = *path.last().unwrap();
        if s == goal {
            out.push(path.clone());
            return;
        }
        if left == 0 {
            return;
        }
        for t in world.transitions(s) {
            path.push(t.next);
            walk(world, goal, left - 1, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(world, goal, max_steps, &mut vec![origin], &mut out);
    out
}

/// Number of paths `goal_paths` would return, without materializing them.
pub fn count_walks(world: &World, origin: StateId, goal: StateId, max_steps: usize) -> u64 {
    let n = world.num_states();
    let mut ways = vec![0u64; n];
    ways[origin.index()] = 1;
    let mut total = 0;
    for _ in 0..max_steps {
        let mut next = vec![0u64; n];
        for s in world.states() {
            let w = ways[s.index()];
            if w == 0 || s == goal {
                continue;
            }
            for t in world.transitions(s) {
                next[t.next.index()] = next[t.next.index()].saturating_add(w);
            }
        }
        total += next[goal.index()];
        ways = next;
    }
    total + u64::from(origin == goal)
}

/// Sum of state rewards over the decision states of a path.
pub fn path_return(rewards: &[f64], path: &[StateId]) -> f64 {
    path[..path.len() - 1].iter().map(|s| rewards[s.index()]).sum()
}

fn move_prob(world: &World, sol: &SoftSolution, from: StateId, to: StateId) -> f64 {
    let k = world.transitions(from).iter().position(|t| t.next == to).expect("adjacent");
    sol.policy_row(from)[k]
}

/// Product of policy probabilities along a path.
pub fn policy_path_prob(world: &World, sol: &SoftSolution, path: &[StateId]) -> f64 {
    path.windows(2).map(|w| move_prob(world, sol, w[0], w[1])).product()
}

/// Total variation between the policy's path distribution and the MaxEnt
/// distribution `exp(return) / Z`, both restricted to `paths`.
pub fn maxent_tv(world: &World, sol: &SoftSolution, rewards: &[f64], paths: &[Vec<StateId>]) -> f64 {
    let p: Vec<f64> = paths.iter().map(|t| policy_path_prob(world, sol, t)).collect();
    let q: Vec<f64> = paths.iter().map(|t| path_return(rewards, t).exp()).collect();
    let zp: f64 = p.iter().sum();
    let zq: f64 = q.iter().sum();
    0.5 * p.iter().zip(&q).map(|(a, b)| (a / zp - b / zq).abs()).sum::<f64>()
}

/// SVF by enumerating every action sequence of length `horizon - 1`.
pub fn brute_svf(world: &World, sol: &SoftSolution, origin: &[f64], horizon: usize) -> Vec<f64> {
    fn walk(world: &World, sol: &SoftSolution, s: StateId, p: f64, left: usize, out: &mut [f64]) {
        out[s.index()] += p;
        if left == 0 {
            return;
        }
        for (t, &q) in world.transitions(s).iter().zip(sol.policy_row(s)) {
            walk(world, sol, t.next, p * q, left - 1, out);
        }
    }
    let mut out = vec![0.0; world.num_states()];
    for s in world.states() {
        let m = origin[s.index()];
        if m > 0.0 {
            walk(world, sol, s, m, horizon - 1, &mut out);
        }
    }
    out
}

fn step_cost(world: &World, a: StateId, b: StateId) -> f64 {
    let (ca, cb) = (world.cell(a), world.cell(b));
    let diag = ca.row != cb.row && ca.col != cb.col;
    world.cell_size() * if diag { 2f64.sqrt() } else { 1.0 }
}

/// All-pairs network distances (Floyd-Warshall).
pub fn all_pairs(world: &World) -> Vec<Vec<f64>> {
    let n = world.num_states();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for s in world.states() {
        d[s.index()][s.index()] = 0.0;
        for t in world.transitions(s) {
            if t.next != s {
                d[s.index()][t.next.index()] = step_cost(world, s, t.next);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Minimum length over all simple paths; `None` when unreachable.
pub fn brute_shortest(world: &World, origin: StateId, goal: StateId) -> Option<f64> {
    fn walk(world: &World, goal: StateId, s: StateId, len: f64, seen: &mut Vec<bool>, best: &mut Option<f64>) {
        if s == goal {
            if best.is_none_or(|b| len < b) {
                *best = Some(len);
            }
            return;
        }
        for t in world.transitions(s) {
            let v = t.next;
            if seen[v.index()] {
                continue;
            }
            seen[v.index()] = true;
            walk(world, goal, v, len + step_cost(world, s, v), seen, best);
            seen[v.index()] = false;
        }
    }
    let mut seen = vec![false; world.num_states()];
    seen[origin.index()] = true;
    let mut best = None;
    walk(world, goal, origin, 0.0, &mut seen, &mut best);
    best
}

/// Geometric length of a cell path.
pub fn path_length(world: &World, path: &[StateId]) -> f64 {
    path.windows(2).filter(|w| w[0] != w[1]).map(|w| step_cost(world, w[0], w[1])).sum()
}

/// Map-matching score of every candidate assignment, best kept. Gaussian
/// emission with `sigma`, candidates within `gate * sigma`, transition
/// `-|straight - network| / beta - ln beta`.
pub fn exhaustive_viterbi(
    world: &World,
    points: &[(f64, f64)],
    sigma: f64,
    gate: f64,
    beta: f64,
) -> Option<(Vec<StateId>, f64)> {
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let net = all_pairs(world);
    let cands: Vec<Vec<StateId>> = points
        .iter()
        .map(|&p| world.states().filter(|&s| dist(p, world.cell_center(s)) <= gate * sigma).collect())
        .collect();
    if cands.iter().any(Vec::is_empty) {
        return None;
    }
    let emission = |p: (f64, f64), s: StateId| {
        let z = dist(p, world.cell_center(s)) / sigma;
        -0.5 * z * z - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
    };
    let mut best: Option<(Vec<StateId>, f64)> = None;
    let mut idx = vec![0usize; points.len()];
    loop {
        let seq: Vec<StateId> = idx.iter().zip(&cands).map(|(&i, c)| c[i]).collect();
        let mut score = emission(points[0], seq[0]);
        for i in 1..seq.len() {
            let d = net[seq[i - 1].index()][seq[i].index()];
            score += if d.is_finite() {
                -(dist(points[i - 1], points[i]) - d).abs() / beta - beta.ln()
            } else {
                f64::NEG_INFINITY
            };
            score += emission(points[i], seq[i]);
        }
        if score.is_finite() && best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((seq, score));
        }
        // Odometer increment, last index fastest.
        let mut k = points.len();
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < cands[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}
