//! Distribution distances, path overlap and report assembly.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{min_max, World};
use crate::error::{CoreError, Result};
use crate::trajectory::stats::mean_var;
use crate::trajectory::Trajectory;

/// Additive smoothing used by [`kl_smoothed`].
pub const KL_SMOOTHING: f64 = 1e-12;

/// Probability vector over a fixed support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Checks nonnegativity and unit mass (within 1e-9).
    pub fn new(p: Vec<f64>) -> Result<Distribution> {
        if p.is_empty() {
            return Err(CoreError::Empty("distribution"));
        }
        if let Some(i) = p.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CoreError::Invalid(format!("probability {i} is negative or not finite: {}", p[i])));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Distribution(p))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(w: Vec<f64>) -> Result<Distribution> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(CoreError::Invalid(format!("weights must have positive finite mass, got {total}")));
        }
        Distribution::new(w.into_iter().map(|x| x / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn same_support(p: &Distribution, q: &Distribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(CoreError::SupportMismatch(p.len(), q.len()));
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(CoreError::ZeroSupport(i));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// `KL(p || q)` in nats.
pub fn kl(p: &Distribution, q: &Distribution) -> Result<f64> {
    same_support(p, q)?;
    kl_raw(&p.0, &q.0)
}

/// KL after adding `eps` to every entry of both sides and renormalizing.
pub fn kl_smoothed(p: &Distribution, q: &Distribution, eps: f64) -> Result<f64> {
    same_support(p, q)?;
    let smooth = |d: &Distribution| {
        let z = 1.0 + eps * d.len() as f64;
        d.0.iter().map(|x| (x + eps) / z).collect::<Vec<_>>()
    };
    kl_raw(&smooth(p), &smooth(q))
}

/// Square-root Jensen-Shannon distance in nats, in `[0, sqrt(ln 2)]`.
pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64> {
    same_support(p, q)?;
    let m: Vec<f64> = p.0.iter().zip(&q.0).map(|(a, b)| 0.5 * (a + b)).collect();
    let div = 0.5 * (kl_raw(&p.0, &m)? + kl_raw(&q.0, &m)?);
    Ok(div.max(0.0).sqrt())
}

/// Sørensen-Dice coefficient of the distinct cells of two trajectories.
pub fn cpc(a: &Trajectory, b: &Trajectory) -> f64 {
    let ca = a.cell_set();
    let cb = b.cell_set();
    let common = ca.intersection(&cb).count();
    2.0 * common as f64 / (ca.len() + cb.len()) as f64
}

/// Visit frequencies of decision states (each step's state; destinations are
/// not counted), normalized.
pub fn svf_distribution<'a, I>(trajs: I, world: &World) -> Result<Distribution>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut counts = vec![0.0; world.num_states()];
    for t in trajs {
        for (s, _) in t.steps() {
            world.check_state(s)?;
            counts[s.index()] += 1.0;
        }
    }
    if counts.iter().all(|&c| c == 0.0) {
        return Err(CoreError::Empty("trajectory steps"));
    }
    Distribution::from_weights(counts)
}

/// Population mean and variance of min-max normalized rewards.
pub fn reward_stats(rewards: &[f64]) -> Result<(f64, f64)> {
    if rewards.len() < 2 {
        return Err(CoreError::Invalid(format!("reward statistics need at least 2 states, got {}", rewards.len())));
    }
    Ok(mean_var(&min_max(rewards)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
        }
    }
}

/// A real trip with its synthetic and shortest-path counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTriple {
    pub real: Trajectory,
    pub synthetic: Trajectory,
    pub shortest: Trajectory,
    /// Whether the synthetic rollout reached its goal.
    pub synthetic_terminated: bool,
}

impl PathTriple {
    pub fn new(real: Trajectory, synthetic: Trajectory, shortest: Trajectory) -> Self {
        PathTriple { real, synthetic, shortest, synthetic_terminated: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionBin {
    /// Distinct cells of the real trip.
    pub decisions: usize,
    pub count: usize,
    pub synthetic: Summary,
    pub shortest: Summary,
}

/// CPC against the real trip, binned by the real trip's decision count
/// (unit-width bins).
pub fn cpc_by_decision_frequency(triples: &[PathTriple]) -> Result<Vec<DecisionBin>> {
    if triples.is_empty() {
        return Err(CoreError::Empty("path triples"));
    }
    let mut bins: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in triples {
        let e = bins.entry(t.real.segment_count()).or_default();
        e.0.push(cpc(&t.real, &t.synthetic));
        e.1.push(cpc(&t.real, &t.shortest));
    }
    Ok(bins
        .into_iter()
        .map(|(decisions, (syn, sp))| DecisionBin {
            decisions,
            count: syn.len(),
            synthetic: Summary::of(&syn),
            shortest: Summary::of(&sp),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// JSD between real and synthetic visit distributions.
    pub jsd: f64,
    /// JSD between real and shortest-path visit distributions.
    pub jsd_shortest: f64,
    pub mean_cpc_synthetic: f64,
    pub mean_cpc_shortest: f64,
    pub pairs: usize,
    /// Pairs left out because the synthetic rollout never reached its goal.
    pub excluded_non_terminated: usize,
    pub cpc_by_decision_bin: Vec<DecisionBin>,
    pub reward_mean: f64,
    pub reward_variance: f64,
}

/// Assembles the report. Pairs whose rollout was truncated are dropped
/// unless `include_non_terminated` is set.
pub fn evaluate_triples(
    world: &World,
    triples: &[PathTriple],
    rewards: &[f64],
    include_non_terminated: bool,
) -> Result<EvalReport> {
    let kept: Vec<PathTriple> = triples
        .iter()
        .filter(|t| include_non_terminated || t.synthetic_terminated)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(CoreError::Empty("terminated path triples"));
    }
    let real = svf_distribution(kept.iter().map(|t| &t.real), world)?;
    let syn = svf_distribution(kept.iter().map(|t| &t.synthetic), world)?;
    let sp = svf_distribution(kept.iter().map(|t| &t.shortest), world)?;
    let n = kept.len() as f64;
    let (reward_mean, reward_variance) = reward_stats(rewards)?;
    Ok(EvalReport {
        jsd: jsd(&real, &syn)?,
        jsd_shortest: jsd(&real, &sp)?,
        mean_cpc_synthetic: kept.iter().map(|t| cpc(&t.real, &t.synthetic)).sum::<f64>() / n,
        mean_cpc_shortest: kept.iter().map(|t| cpc(&t.real, &t.shortest)).sum::<f64>() / n,
        pairs: kept.len(),
        excluded_non_terminated: triples.len() - kept.len(),
        cpc_by_decision_bin: cpc_by_decision_frequency(&kept)?,
        reward_mean,
        reward_variance,
    })
}

/// Per-pair CSV: `pair, decisions, cpc_synthetic, cpc_shortest, terminated`.
pub fn write_pair_csv<W: Write>(triples: &[PathTriple], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "order_id", "decisions", "cpc_synthetic", "cpc_shortest", "terminated"])?;
    for (i, t) in triples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            t.real.order_id.clone().unwrap_or_default(),
            t.real.segment_count().to_string(),
            format!("{:.12}", cpc(&t.real, &t.synthetic)),
            format!("{:.12}", cpc(&t.real, &t.shortest)),
            t.synthetic_terminated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Visit histograms: `state_id, row, col, real, synthetic, shortest`.
pub fn write_svf_csv<W: Write>(
    world: &World,
    real: &Distribution,
    synthetic: &Distribution,
    shortest: &Distribution,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state_id", "row", "col", "real", "synthetic", "shortest"])?;
    for s in world.states() {
        let c = world.cell(s);
        let i = s.index();
        w.write_record([
            i.to_string(),
            c.row.to_string(),
            c.col.to_string(),
            format!("{:.12e}", real.probs()[i]),
            format!("{:.12e}", synthetic.probs()[i]),
            format!("{:.12e}", shortest.probs()[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Cell, StateId};
    use crate::trajectory::to_trajectory;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn kl_values() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((kl(&p, &q).unwrap() - 0.14384).abs() < 1e-5);
        assert!((kl(&p, &q).unwrap() - kl(&q, &p).unwrap()).abs() > 1e-3);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_zero_support() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[1.0, 0.0]);
        assert!(matches!(kl(&p, &q), Err(CoreError::ZeroSupport(1))));
        let v = kl_smoothed(&p, &q, KL_SMOOTHING).unwrap();
        assert!(v.is_finite() && v > 1.0);
        assert!(matches!(kl(&p, &d(&[1.0])), Err(CoreError::SupportMismatch(2, 1))));
    }

    #[test]
    fn jsd_disjoint() {
        let v = jsd(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap();
        assert!((v - 2f64.ln().sqrt()).abs() < 1e-12);
        assert_eq!(jsd(&d(&[0.3, 0.7]), &d(&[0.3, 0.7])).unwrap(), 0.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    fn path(w: &World, cols: &[usize]) -> Trajectory {
        let cells: Vec<StateId> = cols.iter().map(|&c| w.state_at(Cell::new(0, c)).unwrap()).collect();
        to_trajectory(&cells, w).unwrap()
    }

    #[test]
    fn cpc_values() {
        let w = World::open(1, 6, vec![vec![0.0]; 6]).unwrap();
        let a = path(&w, &[0, 1, 2]);
        let b = path(&w, &[1, 2, 3]);
        assert_eq!(cpc(&a, &b), 2.0 / 3.0);
        assert_eq!(cpc(&a, &a), 1.0);
        assert_eq!(cpc(&a, &path(&w, &[4, 5])), 0.0);
    }

    #[test]
    fn svf_distribution_counts_steps() {
        let w = World::open(1, 6, vec![vec![0.0]; 6]).unwrap();
        let t = path(&w, &[0, 1, 2, 3]);
        let p = svf_distribution([&t], &w).unwrap();
        assert_eq!(&p.probs()[..4], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let twice = svf_distribution([&t, &t], &w).unwrap();
        assert_eq!(p, twice);
    }

    #[test]
    fn reward_stats_examples() {
        let (m, v) = reward_stats(&[0.0, 5.0, 10.0]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(reward_stats(&[3.0, 3.0, 3.0]).unwrap(), (0.0, 0.0));
        let (m2, v2) = reward_stats(&[7.0, 17.0, 27.0]).unwrap();
        assert!((m2 - m).abs() < 1e-15 && (v2 - v).abs() < 1e-15);
    }

    #[test]
    fn decision_bins() {
        let w = World::open(1, 6, vec![vec![0.0]; 6]).unwrap();
        let a = path(&w, &[0, 1, 2]);
        let b = path(&w, &[1, 2, 3]);
        let same = cpc_by_decision_frequency(&[PathTriple::new(a.clone(), a.clone(), a.clone())]).unwrap();
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].synthetic.mean, 1.0);
        let one = cpc_by_decision_frequency(&[PathTriple::new(a.clone(), b.clone(), a.clone())]).unwrap();
        assert_eq!(one[0].synthetic.mean, 2.0 / 3.0);
        assert_eq!(one[0].decisions, 3);
        assert!(cpc_by_decision_frequency(&[]).is_err());
    }

    #[test]
    fn quartiles_interpolate() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q3, 3.25);
    }
}
