//! Grid-constrained road network environment.
//!
//! A [`World`] is a `rows x cols` grid of cells of side `cell_size` meters.
//! Passable cells are the MDP states; each carries a feature vector of
//! streetscape proportions in `[0, 1]`. Movement follows the 8-neighbour grid
//! plus a stay action, with `F` pointing to decreasing row (north) and `R` to
//! increasing column (east).

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_CELL_SIZE: f64 = 100.0;
pub const DEFAULT_FEATURE_DIM: usize = 23;

/// One of the nine movement directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    F,
    FL,
    L,
    BL,
    B,
    BR,
    R,
    FR,
    ST,
}

impl Action {
    /// All actions in index order. Greedy tie-breaks prefer earlier entries.
    pub const ALL: [Action; 9] = [
        Action::F,
        Action::FL,
        Action::L,
        Action::BL,
        Action::B,
        Action::BR,
        Action::R,
        Action::FR,
        Action::ST,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// `(drow, dcol)` offset of the destination cell.
    pub fn offset(self) -> (i64, i64) {
        match self {
            Action::F => (-1, 0),
            Action::FL => (-1, -1),
            Action::L => (0, -1),
            Action::BL => (1, -1),
            Action::B => (1, 0),
            Action::BR => (1, 1),
            Action::R => (0, 1),
            Action::FR => (-1, 1),
            Action::ST => (0, 0),
        }
    }

    pub fn from_offset(drow: i64, dcol: i64) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.offset() == (drow, dcol))
    }

    pub fn opposite(self) -> Action {
        let (dr, dc) = self.offset();
        Action::from_offset(-dr, -dc).expect("offsets are symmetric")
    }

    pub fn is_diagonal(self) -> bool {
        let (dr, dc) = self.offset();
        dr != 0 && dc != 0
    }

    /// Geometric length of the move in cell units.
    pub fn length(self) -> f64 {
        match self {
            Action::ST => 0.0,
            a if a.is_diagonal() => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

/// Dense index of a passable cell. States are numbered in row-major order
/// of their cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for StateId {
    fn from(i: usize) -> Self {
        StateId(i as u32)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// A valid move out of a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub action: Action,
    pub next: StateId,
}

/// Anchors the grid on the globe: `(lon0, lat0)` is the north-west corner of
/// cell (0, 0). Projection is equirectangular about that corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Georef {
    pub lon0: f64,
    pub lat0: f64,
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

impl Georef {
    /// Local planar coordinates in meters: `x` east, `y` south.
    pub fn project(&self, lon: f64, lat: f64) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let x = (lon - self.lon0) * k * self.lat0.to_radians().cos();
        let y = (self.lat0 - lat) * k;
        (x, y)
    }

    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let lon = self.lon0 + x / (k * self.lat0.to_radians().cos());
        let lat = self.lat0 - y / k;
        (lon, lat)
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

/// The grid MDP: states, local action sets, and deterministic transitions.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    rows: usize,
    cols: usize,
    cell_size: f64,
    passable: Vec<bool>,
    cell_state: Vec<Option<StateId>>,
    state_cell: Vec<Cell>,
    features: Vec<Vec<f64>>,
    feature_dim: usize,
    adj_start: Vec<usize>,
    adj: Vec<Transition>,
    georef: Option<Georef>,
    feature_names: Option<Vec<String>>,
}

impl World {
    /// Builds a world. `features` holds one row per passable cell, in
    /// row-major cell order.
    pub fn build(
        rows: usize,
        cols: usize,
        blocked: &[usize],
        features: Vec<Vec<f64>>,
    ) -> Result<World> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::EmptyGrid { rows, cols });
        }
        let cells = rows * cols;
        let mut passable = vec![true; cells];
        for &b in blocked {
            if b >= cells {
                return Err(CoreError::CellIndexOutOfBounds { index: b, cells });
            }
            passable[b] = false;
        }
        let n_states = passable.iter().filter(|p| **p).count();
        if n_states == 0 {
            return Err(CoreError::NoPassableCells);
        }
        if features.len() != n_states {
            return Err(CoreError::FeatureRowCount {
                expected: n_states,
                got: features.len(),
            });
        }
        let feature_dim = features[0].len();
        for (r, row) in features.iter().enumerate() {
            if row.len() != feature_dim {
                return Err(CoreError::DimensionMismatch {
                    expected: feature_dim,
                    got: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(CoreError::NonFinite { row: r, col: c });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(CoreError::FeatureOutOfRange { row: r, col: c, value: v });
                }
            }
        }

        let mut cell_state = vec![None; cells];
        let mut state_cell = Vec::with_capacity(n_states);
        for (i, &p) in passable.iter().enumerate() {
            if p {
                cell_state[i] = Some(StateId::from(state_cell.len()));
                state_cell.push(Cell::new(i / cols, i % cols));
            }
        }

        let mut adj_start = Vec::with_capacity(n_states + 1);
        let mut adj = Vec::with_capacity(n_states * 9);
        for cell in &state_cell {
            adj_start.push(adj.len());
            for action in Action::ALL {
                let (dr, dc) = action.offset();
                let r = cell.row as i64 + dr;
                let c = cell.col as i64 + dc;
                if r < 0 || c < 0 || r >= rows as i64 || c >= cols as i64 {
                    continue;
                }
                if let Some(next) = cell_state[r as usize * cols + c as usize] {
                    adj.push(Transition { action, next });
                }
            }
        }
        adj_start.push(adj.len());

        Ok(World {
            rows,
            cols,
            cell_size: DEFAULT_CELL_SIZE,
            passable,
            cell_state,
            state_cell,
            features,
            feature_dim,
            adj_start,
            adj,
            georef: None,
            feature_names: None,
        })
    }

    /// An open grid with every cell passable.
    pub fn open(rows: usize, cols: usize, features: Vec<Vec<f64>>) -> Result<World> {
        World::build(rows, cols, &[], features)
    }

    pub fn with_cell_size(mut self, cell_size: f64) -> Result<World> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(CoreError::Invalid(format!("cell_size must be positive, got {cell_size}")));
        }
        self.cell_size = cell_size;
        Ok(self)
    }

    pub fn with_georef(mut self, georef: Georef) -> World {
        self.georef = Some(georef);
        self
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<World> {
        if names.len() != self.feature_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.feature_dim,
                got: names.len(),
            });
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn georef(&self) -> Option<Georef> {
        self.georef
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn num_states(&self) -> usize {
        self.state_cell.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn states(&self) -> impl ExactSizeIterator<Item = StateId> + '_ {
        (0..self.num_states()).map(StateId::from)
    }

    pub fn is_passable(&self, cell: Cell) -> bool {
        cell.row < self.rows && cell.col < self.cols && self.passable[cell.row * self.cols + cell.col]
    }

    /// Row-major indices of blocked cells.
    pub fn blocked_cells(&self) -> Vec<usize> {
        (0..self.passable.len()).filter(|&i| !self.passable[i]).collect()
    }

    pub fn cell(&self, s: StateId) -> Cell {
        self.state_cell[s.index()]
    }

    pub fn cell_index(&self, s: StateId) -> usize {
        let c = self.cell(s);
        c.row * self.cols + c.col
    }

    /// The state occupying `cell`, failing for out-of-bounds or blocked cells.
    pub fn state_at(&self, cell: Cell) -> Result<StateId> {
        if cell.row >= self.rows || cell.col >= self.cols {
            return Err(CoreError::CellOutOfBounds {
                row: cell.row,
                col: cell.col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        self.cell_state[cell.row * self.cols + cell.col].ok_or(CoreError::BlockedCell {
            row: cell.row,
            col: cell.col,
        })
    }

    pub fn state_at_index(&self, cell_index: usize) -> Result<StateId> {
        if cell_index >= self.passable.len() {
            return Err(CoreError::CellIndexOutOfBounds {
                index: cell_index,
                cells: self.passable.len(),
            });
        }
        self.state_at(Cell::new(cell_index / self.cols, cell_index % self.cols))
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        if s.index() < self.num_states() {
            Ok(())
        } else {
            Err(CoreError::UnknownState(s.index()))
        }
    }

    pub fn features(&self, s: StateId) -> &[f64] {
        &self.features[s.index()]
    }

    pub fn feature_table(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Valid moves at `s`, ordered by action index. Always contains `ST`.
    pub fn transitions(&self, s: StateId) -> &[Transition] {
        let i = s.index();
        &self.adj[self.adj_start[i]..self.adj_start[i + 1]]
    }

    /// Offset of `s`'s transitions within the flat (state, action) table.
    pub fn transition_offset(&self, s: StateId) -> usize {
        self.adj_start[s.index()]
    }

    pub fn num_transitions(&self) -> usize {
        self.adj.len()
    }

    pub fn local_actions(&self, s: StateId) -> Result<Vec<Action>> {
        self.check_state(s)?;
        Ok(self.transitions(s).iter().map(|t| t.action).collect())
    }

    pub fn step(&self, s: StateId, action: Action) -> Result<StateId> {
        self.check_state(s)?;
        self.transitions(s)
            .iter()
            .find(|t| t.action == action)
            .map(|t| t.next)
            .ok_or(CoreError::InvalidAction { state: s, action })
    }

    /// The action leading from `from` to `to`, if they are adjacent or equal.
    pub fn action_between(&self, from: StateId, to: StateId) -> Option<Action> {
        self.transitions(from).iter().find(|t| t.next == to).map(|t| t.action)
    }

    /// Cell center in local planar meters (`x` east, `y` south).
    pub fn cell_center(&self, s: StateId) -> (f64, f64) {
        let c = self.cell(s);
        (
            (c.col as f64 + 0.5) * self.cell_size,
            (c.row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Passable states reachable from `origin` (including itself).
    pub fn reachable_from(&self, origin: StateId) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let mut queue = VecDeque::from([origin]);
        seen[origin.index()] = true;
        while let Some(s) = queue.pop_front() {
            for t in self.transitions(s) {
                if !seen[t.next.index()] {
                    seen[t.next.index()] = true;
                    queue.push_back(t.next);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        self.reachable_from(StateId(0)).iter().all(|&r| r)
    }
}

/// Serialized world layout. `features` lists one row per passable cell in
/// row-major order; `blocked` lists row-major cell indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    #[serde(default)]
    pub blocked: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub georef: Option<Georef>,
}

fn default_cell_size() -> f64 {
    DEFAULT_CELL_SIZE
}

impl WorldFile {
    pub fn into_world(self) -> Result<World> {
        let mut world = World::build(self.rows, self.cols, &self.blocked, self.features)?
            .with_cell_size(self.cell_size)?;
        if let Some(g) = self.georef {
            world = world.with_georef(g);
        }
        if let Some(names) = self.feature_names {
            world = world.with_feature_names(names)?;
        }
        Ok(world)
    }
}

impl From<&World> for WorldFile {
    fn from(w: &World) -> Self {
        WorldFile {
            rows: w.rows,
            cols: w.cols,
            cell_size: w.cell_size,
            blocked: w.blocked_cells(),
            features: w.features.clone(),
            feature_names: w.feature_names.clone(),
            georef: w.georef,
        }
    }
}

impl World {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WorldFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<World> {
        serde_json::from_str::<WorldFile>(s)?.into_world()
    }

    /// Reads the row-major CSV alternative: a header line followed by one
    /// line per cell with `row,col,passable,f0,...,f{d-1}`. Blocked cells may
    /// leave the feature columns empty.
    pub fn from_csv(s: &str, cell_size: f64) -> Result<World> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(s.as_bytes());
        let mut entries = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| CoreError::Invalid(format!("missing column {i}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| CoreError::Invalid(format!("bad number in column {i}: {e}")))
            };
            let row = parse(0)? as usize;
            let col = parse(1)? as usize;
            let passable = parse(2)? != 0.0;
            let feats = if passable {
                (3..rec.len()).map(parse).collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            entries.push((row, col, passable, feats));
        }
        let rows = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let cols = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        entries.sort_by_key(|e| (e.0, e.1));
        if entries.len() != rows * cols {
            return Err(CoreError::Invalid(format!(
                "CSV world lists {} cells for a {rows}x{cols} grid",
                entries.len()
            )));
        }
        let mut blocked = Vec::new();
        let mut features = Vec::new();
        for (row, col, passable, feats) in entries {
            if passable {
                features.push(feats);
            } else {
                blocked.push(row * cols + col);
            }
        }
        World::build(rows, cols, &blocked, features)?.with_cell_size(cell_size)
    }
}

/// Per-column min-max scaling to `[0, 1]`. Constant columns map to 0.
pub fn normalize_features(raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let d = raw[0].len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (r, row) in raw.iter().enumerate() {
        if row.len() != d {
            return Err(CoreError::DimensionMismatch { expected: d, got: row.len() });
        }
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { row: r, col: c });
            }
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    Ok(raw
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, &v)| {
                    let span = hi[c] - lo[c];
                    if span > 0.0 {
                        ((v - lo[c]) / span).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Min-max normalization of a single vector; constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Parameters for a randomly generated world with a planted linear reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub blocked_fraction: f64,
    pub feature_dim: usize,
    pub planted_weights: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

fn default_max_attempts() -> usize {
    64
}

impl SynthConfig {
    pub fn new(rows: usize, cols: usize, feature_dim: usize, planted_weights: Vec<f64>) -> Self {
        SynthConfig {
            rows,
            cols,
            blocked_fraction: 0.0,
            feature_dim,
            planted_weights,
            seed: 0,
            cell_size: DEFAULT_CELL_SIZE,
            max_attempts: default_max_attempts(),
        }
    }

    pub fn one_hot(rows: usize, cols: usize, feature_dim: usize, planted: usize) -> Self {
        let mut w = vec![0.0; feature_dim];
        w[planted] = 1.0;
        SynthConfig::new(rows, cols, feature_dim, w)
    }
}

/// Generates a connected world with uniform random features and returns it
/// with the planted reward per state (min-max normalized, constant -> 0).
pub fn generate_synthetic_world(config: &SynthConfig) -> Result<(World, Vec<f64>)> {
    if config.rows == 0 || config.cols == 0 {
        return Err(CoreError::EmptyGrid { rows: config.rows, cols: config.cols });
    }
    if !(0.0..1.0).contains(&config.blocked_fraction) {
        return Err(CoreError::Invalid(format!(
            "blocked_fraction must lie in [0, 1), got {}",
            config.blocked_fraction
        )));
    }
    if config.feature_dim == 0 {
        return Err(CoreError::Invalid("feature_dim must be positive".into()));
    }
    if config.planted_weights.len() != config.feature_dim {
        return Err(CoreError::DimensionMismatch {
            expected: config.feature_dim,
            got: config.planted_weights.len(),
        });
    }

    let cells = config.rows * config.cols;
    let n_blocked = ((config.blocked_fraction * cells as f64).round() as usize).min(cells - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..cells).collect();

    for _ in 0..config.max_attempts.max(1) {
        order.shuffle(&mut rng);
        let mut blocked = order[..n_blocked].to_vec();
        blocked.sort_unstable();
        let features: Vec<Vec<f64>> = (0..cells - n_blocked)
            .map(|_| (0..config.feature_dim).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let world = World::build(config.rows, config.cols, &blocked, features)?
            .with_cell_size(config.cell_size)?;
        if !world.is_connected() {
            continue;
        }
        let raw: Vec<f64> = world
            .states()
            .map(|s| dot(world.features(s), &config.planted_weights))
            .collect();
        let planted = min_max(&raw);
        return Ok((world, planted));
    }
    Err(CoreError::Disconnected { attempts: config.max_attempts })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
