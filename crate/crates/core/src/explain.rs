//! Shapley attribution of rewards to features.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{StateId, World};
use crate::error::{CoreError, Result};
use crate::reward::RewardModel;
use crate::rollout::rollout_rng;
use crate::trajectory::Trajectory;

/// Largest player count handled by full coalition enumeration.
pub const MAX_EXACT_PLAYERS: usize = 14;
/// Default size of the interventional background set.
pub const DEFAULT_BACKGROUND: usize = 100;

/// Coalitions are bit masks: bit `i` set means player `i` is in.
pub type Coalition = u64;

pub trait CoalitionGame: Sync {
    fn players(&self) -> usize;

    fn value(&self, coalition: Coalition) -> f64;

    /// Values of many coalitions at once; games with batched evaluation
    /// override this.
    fn values_for(&self, coalitions: &[Coalition]) -> Vec<f64> {
        coalitions.iter().map(|&c| self.value(c)).collect()
    }
}

/// A game given by its full value table, indexed by coalition mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedGame {
    n: usize,
    values: Vec<f64>,
}

impl TabulatedGame {
    pub fn new(n: usize, values: Vec<f64>) -> Result<TabulatedGame> {
        if n > 20 {
            return Err(CoreError::TooManyPlayers { n, max: 20 });
        }
        if values.len() != 1 << n {
            return Err(CoreError::DimensionMismatch { expected: 1 << n, got: values.len() });
        }
        Ok(TabulatedGame { n, values })
    }

    pub fn from_fn(n: usize, f: impl Fn(Coalition) -> f64) -> Result<TabulatedGame> {
        TabulatedGame::new(n, (0..1u64 << n).map(f).collect())
    }
}

impl CoalitionGame for TabulatedGame {
    fn players(&self) -> usize {
        self.n
    }

    fn value(&self, coalition: Coalition) -> f64 {
        self.values[coalition as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    Sampled,
    /// Every ordering enumerated; a check on the sampling estimator.
    Permutations,
}

impl ShapleyMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapleyMethod::Exact => "exact",
            ShapleyMethod::Sampled => "sampled",
            ShapleyMethod::Permutations => "permutations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi: Vec<f64>,
    pub method: ShapleyMethod,
    /// Orderings drawn; 0 for exact.
    pub samples: usize,
    /// Standard error per player; zeros for exact.
    pub stderr: Vec<f64>,
    /// `v(empty set)`.
    pub baseline: f64,
    /// `v(all players)`.
    pub full_value: f64,
    pub instance: Option<StateId>,
}

fn check_players(n: usize) -> Result<()> {
    if n > 64 {
        return Err(CoreError::TooManyPlayers { n, max: 64 });
    }
    Ok(())
}

fn full_mask(n: usize) -> Coalition {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Exact Shapley values by enumerating every coalition:
/// `phi_i = sum_{S not containing i} |S|! (n-|S|-1)! / n! * (v(S + i) - v(S))`.
pub fn exact_shapley<G: CoalitionGame + ?Sized>(game: &G) -> Result<ShapleyReport> {
    let n = game.players();
    if n > MAX_EXACT_PLAYERS {
        return Err(CoreError::TooManyPlayers { n, max: MAX_EXACT_PLAYERS });
    }
    let masks: Vec<Coalition> = (0..1u64 << n).collect();
    let v = game.values_for(&masks);
    // weight[k] = k! (n-k-1)! / n!
    let weight: Vec<f64> = (0..n)
        .map(|k| {
            let mut w = 1.0 / n as f64;
            // 1 / (n * C(n-1, k))
            let mut c = 1.0;
            for j in 0..k {
                c = c * (n - 1 - j) as f64 / (j + 1) as f64;
            }
            w /= c;
            w
        })
        .collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        *p = masks
            .iter()
            .filter(|&&s| s & bit == 0)
            .map(|&s| weight[s.count_ones() as usize] * (v[(s | bit) as usize] - v[s as usize]))
            .sum();
    }
    Ok(ShapleyReport {
        phi,
        method: ShapleyMethod::Exact,
        samples: 0,
        stderr: vec![0.0; n],
        baseline: v[0],
        full_value: v[full_mask(n) as usize],
        instance: None,
    })
}

/// Running mean and sum of squared deviations per player.
struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Moments {
        Moments { count: 0, mean: vec![0.0; n], m2: vec![0.0; n] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, s), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = xi - *m;
            *m += d / k;
            *s += d * (xi - *m);
        }
    }

    fn stderr(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![f64::INFINITY; self.mean.len()];
        }
        let k = self.count as f64;
        self.m2.iter().map(|s| (s / (k - 1.0)).sqrt() / k.sqrt()).collect()
    }
}

/// Marginal contributions along one ordering.
fn marginals<G: CoalitionGame + ?Sized>(game: &G, order: &[usize]) -> (Vec<f64>, f64, f64) {
    let mut masks = Vec::with_capacity(order.len() + 1);
    let mut s: Coalition = 0;
    masks.push(s);
    for &i in order {
        s |= 1 << i;
        masks.push(s);
    }
    let v = game.values_for(&masks);
    let mut out = vec![0.0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = v[k + 1] - v[k];
    }
    (out, v[0], v[order.len()])
}

/// Permutation-sampling estimate with per-player standard errors.
pub fn sampled_shapley<G: CoalitionGame + ?Sized>(game: &G, samples: usize, seed: u64) -> Result<ShapleyReport> {
    sampled_shapley_stream(game, samples, seed, 0)
}

fn sampled_shapley_stream<G: CoalitionGame + ?Sized>(
    game: &G,
    samples: usize,
    seed: u64,
    stream: u64,
) -> Result<ShapleyReport> {
    let n = game.players();
    check_players(n)?;
    if samples == 0 {
        return Err(CoreError::Invalid("samples must be at least 1".into()));
    }
    let mut rng = rollout_rng(seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut moments = Moments::new(n);
    let (mut baseline, mut full_value) = (0.0, 0.0);
    for _ in 0..samples {
        order.shuffle(&mut rng);
        let (m, b, f) = marginals(game, &order);
        baseline = b;
        full_value = f;
        moments.push(&m);
    }
    Ok(ShapleyReport {
        stderr: moments.stderr(),
        phi: moments.mean,
        method: ShapleyMethod::Sampled,
        samples,
        baseline,
        full_value,
        instance: None,
    })
}

/// Averages marginal contributions over all `n!` orderings.
pub fn permutation_shapley<G: CoalitionGame + ?Sized>(game: &G) -> Result<ShapleyReport> {
    let n = game.players();
    if n > 9 {
        return Err(CoreError::TooManyPlayers { n, max: 9 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut sum = vec![0.0; n];
    let mut count = 0usize;
    let (mut baseline, mut full_value) = (0.0, 0.0);
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut visit = |order: &[usize]| {
        let (m, b, f) = marginals(game, order);
        baseline = b;
        full_value = f;
        for (s, x) in sum.iter_mut().zip(&m) {
            *s += x;
        }
        count += 1;
    };
    visit(&order);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            visit(&order);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let k = count as f64;
    Ok(ShapleyReport {
        phi: sum.into_iter().map(|s| s / k).collect(),
        method: ShapleyMethod::Permutations,
        samples: count,
        stderr: vec![0.0; n],
        baseline,
        full_value,
        instance: None,
    })
}

/// `v(S) = mean_b R(x_S, b_rest)`: instance values on `S`, background values
/// elsewhere.
pub struct RewardGame<'a> {
    model: &'a RewardModel,
    instance: Vec<f64>,
    background: Array2<f64>,
}

/// Rows evaluated per forward batch.
const CHUNK_ROWS: usize = 8192;

impl<'a> RewardGame<'a> {
    pub fn instance(&self) -> &[f64] {
        &self.instance
    }
}

pub fn reward_game<'a>(model: &'a RewardModel, instance: &[f64], background: &[Vec<f64>]) -> Result<RewardGame<'a>> {
    let d = model.input_dim();
    check_players(d)?;
    if instance.len() != d {
        return Err(CoreError::DimensionMismatch { expected: d, got: instance.len() });
    }
    if background.is_empty() {
        return Err(CoreError::Empty("background set"));
    }
    let mut bg = Array2::zeros((background.len(), d));
    for (i, row) in background.iter().enumerate() {
        if row.len() != d {
            return Err(CoreError::DimensionMismatch { expected: d, got: row.len() });
        }
        bg.row_mut(i).iter_mut().zip(row).for_each(|(a, &b)| *a = b);
    }
    Ok(RewardGame { model, instance: instance.to_vec(), background: bg })
}

impl CoalitionGame for RewardGame<'_> {
    fn players(&self) -> usize {
        self.instance.len()
    }

    fn value(&self, coalition: Coalition) -> f64 {
        self.values_for(&[coalition])[0]
    }

    fn values_for(&self, coalitions: &[Coalition]) -> Vec<f64> {
        let b = self.background.nrows();
        let d = self.instance.len();
        let per_chunk = (CHUNK_ROWS / b).max(1);
        let mut out = Vec::with_capacity(coalitions.len());
        for chunk in coalitions.chunks(per_chunk) {
            let mut xs = Array2::zeros((chunk.len() * b, d));
            for (k, &mask) in chunk.iter().enumerate() {
                for r in 0..b {
                    let mut row = xs.row_mut(k * b + r);
                    for j in 0..d {
                        row[j] = if mask & (1 << j) != 0 { self.instance[j] } else { self.background[[r, j]] };
                    }
                }
            }
            let ys = self.model.forward_batch(xs.view()).expect("dimensions checked at construction");
            for k in 0..chunk.len() {
                out.push(ys.slice(ndarray::s![k * b..(k + 1) * b]).sum() / b as f64);
            }
        }
        out
    }
}

/// Feature rows of `k` distinct states drawn uniformly (all states if the
/// world is smaller).
pub fn sample_background(world: &World, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = world.num_states();
    let mut rng = rollout_rng(seed, u64::MAX);
    let mut picks = index::sample(&mut rng, n, k.min(n)).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| world.features(StateId(i as u32)).to_vec()).collect()
}

/// Exact when the feature count allows it, sampled with `budget` orderings
/// otherwise. `stream` separates the random streams of different instances.
pub fn attribute(
    model: &RewardModel,
    instance: &[f64],
    background: &[Vec<f64>],
    budget: usize,
    seed: u64,
    stream: u64,
) -> Result<ShapleyReport> {
    let game = reward_game(model, instance, background)?;
    if game.players() <= MAX_EXACT_PLAYERS {
        exact_shapley(&game)
    } else {
        sampled_shapley_stream(&game, budget, seed, stream)
    }
}

/// Attributions for every state, in state order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiTable {
    pub feature_names: Vec<String>,
    pub states: Vec<StateId>,
    pub features: Vec<Vec<f64>>,
    pub reports: Vec<ShapleyReport>,
}

impl PhiTable {
    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    pub table: PhiTable,
    /// Mean absolute attribution per feature.
    pub mean_abs: Vec<f64>,
    /// Feature indices by decreasing mean absolute attribution.
    pub ranking: Vec<usize>,
}

fn feature_names(world: &World) -> Vec<String> {
    match world.feature_names() {
        Some(n) => n.to_vec(),
        None => (0..world.feature_dim()).map(|j| format!("f{j}")).collect(),
    }
}

/// Attributions for every state of `world` and the per-feature ranking.
pub fn global_importance(
    model: &RewardModel,
    world: &World,
    background: &[Vec<f64>],
    budget: usize,
    seed: u64,
) -> Result<GlobalImportance> {
    if budget == 0 {
        return Err(CoreError::Invalid("budget must be at least 1".into()));
    }
    let states: Vec<StateId> = world.states().collect();
    let reports: Vec<ShapleyReport> = states
        .par_iter()
        .map(|&s| {
            let mut r = attribute(model, world.features(s), background, budget, seed, s.0 as u64)?;
            r.instance = Some(s);
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let d = world.feature_dim();
    let mut mean_abs = vec![0.0; d];
    for r in &reports {
        for (m, p) in mean_abs.iter_mut().zip(&r.phi) {
            *m += p.abs();
        }
    }
    let n = reports.len().max(1) as f64;
    mean_abs.iter_mut().for_each(|m| *m /= n);
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    Ok(GlobalImportance {
        table: PhiTable {
            feature_names: feature_names(world),
            features: states.iter().map(|&s| world.features(s).to_vec()).collect(),
            states,
            reports,
        },
        mean_abs,
        ranking,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependencePoint {
    pub state: StateId,
    pub x: f64,
    /// `x` standardized over all states (population standard deviation).
    pub z: f64,
    pub phi: f64,
}

/// `(x_j, phi_j)` for every state, sorted by `x_j` then state.
pub fn dependence_data(table: &PhiTable, j: usize) -> Result<Vec<DependencePoint>> {
    let d = table.feature_dim();
    if j >= d {
        return Err(CoreError::Invalid(format!("feature index {j} out of range for {d} features")));
    }
    let xs: Vec<f64> = table.features.iter().map(|f| f[j]).collect();
    let (mean, var) = crate::trajectory::stats::mean_var(&xs);
    let sd = var.sqrt();
    let mut pts: Vec<DependencePoint> = table
        .states
        .iter()
        .zip(&xs)
        .zip(&table.reports)
        .map(|((&state, &x), r)| DependencePoint {
            state,
            x,
            z: if sd > 0.0 { (x - mean) / sd } else { 0.0 },
            phi: r.phi[j],
        })
        .collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.state.cmp(&b.state)));
    Ok(pts)
}

/// One report per step state of `traj`, in visiting order.
pub fn local_trip_attribution(
    model: &RewardModel,
    world: &World,
    traj: &Trajectory,
    background: &[Vec<f64>],
    budget: usize,
    seed: u64,
) -> Result<Vec<ShapleyReport>> {
    let states: Vec<StateId> = if traj.is_empty() { traj.states().to_vec() } else { traj.steps().map(|(s, _)| s).collect() };
    states
        .iter()
        .map(|&s| {
            world.check_state(s)?;
            let mut r = attribute(model, world.features(s), background, budget, seed, s.0 as u64)?;
            r.instance = Some(s);
            Ok(r)
        })
        .collect()
}

/// Sum of mean |phi| over the features of each named group.
pub fn group_summary(importance: &GlobalImportance, groups: &BTreeMap<String, Vec<usize>>) -> Result<BTreeMap<String, f64>> {
    let d = importance.mean_abs.len();
    groups
        .iter()
        .map(|(name, idx)| {
            if let Some(&j) = idx.iter().find(|&&j| j >= d) {
                return Err(CoreError::Invalid(format!("group {name} names feature {j}, only {d} exist")));
            }
            Ok((name.clone(), idx.iter().map(|&j| importance.mean_abs[j]).sum()))
        })
        .collect()
}

/// `state_id, feature_id, feature_value, phi, method, stderr`.
pub fn write_phi_csv<W: Write>(table: &PhiTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state_id", "feature_id", "feature_value", "phi", "method", "stderr"])?;
    for ((s, x), r) in table.states.iter().zip(&table.features).zip(&table.reports) {
        for j in 0..x.len() {
            w.write_record([
                s.0.to_string(),
                j.to_string(),
                format!("{:.12e}", x[j]),
                format!("{:.12e}", r.phi[j]),
                r.method.as_str().to_string(),
                format!("{:.6e}", r.stderr[j]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `state_id, x, z, phi`.
pub fn write_dependence_csv<W: Write>(points: &[DependencePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state_id", "x", "z", "phi"])?;
    for p in points {
        w.write_record([
            p.state.0.to_string(),
            format!("{:.12e}", p.x),
            format!("{:.12e}", p.z),
            format!("{:.12e}", p.phi),
        ])?;
    }
    w.flush()?;
    Ok(())
}
