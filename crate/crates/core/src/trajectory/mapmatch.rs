//! HMM map matching of GPS fixes onto grid cells.
//!
//! Hidden states are candidate cells near each fix. Emissions are Gaussian in
//! the distance from fix to cell center; transitions follow Newson and Krumm,
//! an exponential in `|straight-line gap - network gap|`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::raw::RawTrip;
use crate::env::{StateId, World};
use crate::error::{CoreError, Result};
use crate::rollout::{geodesic_distances, shortest_path};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    /// GPS noise standard deviation, meters.
    pub sigma_m: f64,
    /// Candidate radius in units of `sigma_m`.
    pub gate_sigmas: f64,
    /// Scale of the transition exponential, meters.
    pub beta_m: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams { sigma_m: 20.0, gate_sigmas: 3.0, beta_m: 100.0 }
    }
}

impl MatchParams {
    pub fn radius_m(&self) -> f64 {
        self.sigma_m * self.gate_sigmas
    }

    pub fn emission_log_prob(&self, dist_m: f64) -> f64 {
        let z = dist_m / self.sigma_m;
        -0.5 * z * z - (self.sigma_m * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }

    pub fn transition_log_prob(&self, straight_m: f64, network_m: f64) -> f64 {
        if !network_m.is_finite() {
            return f64::NEG_INFINITY;
        }
        -(straight_m - network_m).abs() / self.beta_m - self.beta_m.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched cell for every fix.
    pub matched: Vec<StateId>,
    /// Matched cells joined by shortest paths, consecutive duplicates removed.
    pub path: Vec<StateId>,
    /// Joint log probability of `matched`.
    pub log_score: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Candidate cells within the gate of `point`, ordered by state id.
pub(crate) fn candidates(world: &World, point: (f64, f64), params: &MatchParams) -> Vec<(StateId, f64)> {
    let r = params.radius_m();
    world
        .states()
        .filter_map(|s| {
            let d = dist(point, world.cell_center(s));
            (d <= r).then_some((s, d))
        })
        .collect()
}

/// Viterbi decoding of planar GPS points (meters, `x` east, `y` south in the
/// world frame). Ties resolve toward lower state ids.
pub fn hmm_map_match(points: &[(f64, f64)], world: &World, params: &MatchParams) -> Result<MatchResult> {
    if points.len() < 2 {
        return Err(CoreError::Invalid(format!("map matching needs at least 2 points, got {}", points.len())));
    }
    let cands: Vec<Vec<(StateId, f64)>> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = candidates(world, p, params);
            if c.is_empty() {
                Err(CoreError::Unmatched { index: i, radius_m: params.radius_m() })
            } else {
                Ok(c)
            }
        })
        .collect::<Result<_>>()?;

    let mut dist_cache: HashMap<StateId, Vec<f64>> = HashMap::new();
    let mut network = |from: StateId, to: StateId| -> f64 {
        dist_cache.entry(from).or_insert_with(|| geodesic_distances(world, from))[to.index()]
    };

    let mut score: Vec<f64> = cands[0].iter().map(|&(_, d)| params.emission_log_prob(d)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(points.len());
    back.push(vec![0; cands[0].len()]);
    for i in 1..points.len() {
        let straight = dist(points[i - 1], points[i]);
        let mut next_score = Vec::with_capacity(cands[i].len());
        let mut next_back = Vec::with_capacity(cands[i].len());
        for &(to, d) in &cands[i] {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (k, &(from, _)) in cands[i - 1].iter().enumerate() {
                let v = score[k] + params.transition_log_prob(straight, network(from, to));
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            next_score.push(best + params.emission_log_prob(d));
            next_back.push(arg);
        }
        score = next_score;
        back.push(next_back);
    }

    let (mut k, &log_score) = score
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
    if !log_score.is_finite() {
        return Err(CoreError::Invalid("no network-consistent cell sequence for these points".into()));
    }
    let mut matched = vec![StateId(0); points.len()];
    for i in (0..points.len()).rev() {
        matched[i] = cands[i][k].0;
        k = back[i][k];
    }

    let mut path = vec![matched[0]];
    for w in matched.windows(2) {
        if w[0] == w[1] {
            continue;
        }
        let leg = shortest_path(world, w[0], w[1])?;
        path.extend_from_slice(&leg.states()[1..]);
    }
    Ok(MatchResult { matched, path, log_score })
}

/// Matches a raw trip using the world's georeference. Straight-line gaps use
/// the equirectangular projection, which agrees with great-circle distance to
/// well under a meter at city scale.
pub fn match_raw_trip(trip: &RawTrip, world: &World, params: &MatchParams) -> Result<MatchResult> {
    let georef = world
        .georef()
        .ok_or_else(|| CoreError::Invalid("world has no georeference; cannot match GPS points".into()))?;
    let pts: Vec<(f64, f64)> = trip.points.iter().map(|p| georef.project(p.lon, p.lat)).collect();
    hmm_map_match(&pts, world, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Cell, Georef};
    use crate::trajectory::GpsPoint;

    #[test]
    fn zero_noise_corridor() {
        let w = World::open(1, 6, vec![vec![0.0]; 6]).unwrap();
        let pts: Vec<_> = w.states().map(|s| w.cell_center(s)).collect();
        let m = hmm_map_match(&pts, &w, &MatchParams::default()).unwrap();
        assert_eq!(m.matched, w.states().collect::<Vec<_>>());
        assert_eq!(m.path, m.matched);
    }

    #[test]
    fn far_points_are_unmatched() {
        let w = World::open(2, 2, vec![vec![0.0]; 4]).unwrap();
        let pts = vec![(1100.0, 1100.0), (1200.0, 1100.0)];
        assert!(matches!(
            hmm_map_match(&pts, &w, &MatchParams::default()),
            Err(CoreError::Unmatched { index: 0, .. })
        ));
    }

    #[test]
    fn sparse_fixes_are_joined_by_paths() {
        let w = World::open(1, 6, vec![vec![0.0]; 6]).unwrap();
        let first = w.state_at(Cell::new(0, 0)).unwrap();
        let last = w.state_at(Cell::new(0, 5)).unwrap();
        let pts = vec![w.cell_center(first), w.cell_center(last)];
        let m = hmm_map_match(&pts, &w, &MatchParams::default()).unwrap();
        assert_eq!(m.matched, vec![first, last]);
        assert_eq!(m.path.len(), 6);
    }

    #[test]
    fn raw_trip_via_georef() {
        let g = Georef { lon0: 114.0, lat0: 22.7 };
        let w = World::open(1, 4, vec![vec![0.0]; 4]).unwrap().with_georef(g);
        let points = w
            .states()
            .enumerate()
            .map(|(i, s)| {
                let (x, y) = w.cell_center(s);
                let (lon, lat) = g.unproject(x + 3.0, y - 2.0);
                GpsPoint { lon, lat, t_ms: i as i64 * 30_000 }
            })
            .collect();
        let start = chrono::NaiveDate::from_ymd_opt(2017, 11, 7).unwrap().and_hms_opt(8, 0, 0).unwrap();
        let trip = RawTrip { order_id: "x".into(), start_time: start, end_time: start, points };
        let m = match_raw_trip(&trip, &w, &MatchParams::default()).unwrap();
        assert_eq!(m.matched, w.states().collect::<Vec<_>>());
    }
}
