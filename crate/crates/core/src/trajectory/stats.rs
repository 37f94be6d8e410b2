use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDateTime, Weekday};
use serde::Serialize;

use super::Trajectory;
use crate::env::World;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripDistance {
    pub order_id: Option<String>,
    pub label: String,
    /// Grid L1 distance between origin and destination times the cell size.
    pub manhattan_m: f64,
    /// `log10(manhattan_m)`; `None` for zero-distance trips.
    pub log10_distance: Option<f64>,
    pub segment_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelSummary {
    pub trips: usize,
    /// Trips contributing to the log statistics (nonzero distance).
    pub log_trips: usize,
    pub mean_manhattan_m: f64,
    pub mean_log10: f64,
    /// Population variance.
    pub var_log10: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TripStats {
    pub trips: Vec<TripDistance>,
    pub by_label: BTreeMap<String, LabelSummary>,
    /// Trips left out of log statistics because origin and destination share
    /// a cell.
    pub zero_distance_excluded: usize,
    /// Trip count per decision frequency (distinct cells traversed).
    pub decision_histogram: BTreeMap<usize, usize>,
    pub decision_pmf: BTreeMap<usize, f64>,
}

/// "workday" or "weekend" from a trip's start time.
pub fn period_label(start: NaiveDateTime) -> &'static str {
    match start.weekday() {
        Weekday::Sat | Weekday::Sun => "weekend",
        _ => "workday",
    }
}

/// Distance and decision-frequency statistics. `labels[i]` is the period of
/// `trajs[i]`.
pub fn trip_stats(world: &World, trajs: &[Trajectory], labels: &[String]) -> TripStats {
    assert_eq!(trajs.len(), labels.len(), "one label per trip");
    let mut stats = TripStats::default();
    let mut logs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut meters: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for (t, label) in trajs.iter().zip(labels) {
        let (o, d) = t.od();
        let manhattan_m = world.cell(o).manhattan(world.cell(d)) as f64 * world.cell_size();
        let log10_distance = (manhattan_m > 0.0).then(|| manhattan_m.log10());
        if log10_distance.is_none() {
            stats.zero_distance_excluded += 1;
            log::warn!("trip {:?} has coincident OD cells; excluded from log statistics", t.order_id);
        }
        let segments = t.segment_count();
        *stats.decision_histogram.entry(segments).or_default() += 1;
        meters.entry(label.clone()).or_default().push(manhattan_m);
        let entry = logs.entry(label.clone()).or_default();
        if let Some(l) = log10_distance {
            entry.push(l);
        }
        stats.trips.push(TripDistance {
            order_id: t.order_id.clone(),
            label: label.clone(),
            manhattan_m,
            log10_distance,
            segment_count: segments,
        });
    }

    for (label, m) in meters {
        let l = &logs[&label];
        let (mean_log10, var_log10) = mean_var(l);
        stats.by_label.insert(
            label,
            LabelSummary {
                trips: m.len(),
                log_trips: l.len(),
                mean_manhattan_m: mean_var(&m).0,
                mean_log10,
                var_log10,
            },
        );
    }
    let n = trajs.len().max(1) as f64;
    stats.decision_pmf = stats
        .decision_histogram
        .iter()
        .map(|(&k, &c)| (k, c as f64 / n))
        .collect();
    stats
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Cell;
    use crate::trajectory::to_trajectory;

    fn line(w: &World, cols: &[usize]) -> Trajectory {
        let cells: Vec<_> = cols.iter().map(|&c| w.state_at(Cell::new(0, c)).unwrap()).collect();
        to_trajectory(&cells, w).unwrap()
    }

    #[test]
    fn three_cells_apart() {
        let w = World::open(1, 12, vec![vec![0.0]; 12]).unwrap();
        let s = trip_stats(&w, &[line(&w, &[0, 1, 2, 3])], &["workday".into()]);
        assert_eq!(s.trips[0].manhattan_m, 300.0);
        assert!((s.trips[0].log10_distance.unwrap() - 2.4771).abs() < 1e-4);
    }

    #[test]
    fn coincident_od_excluded_from_logs() {
        let w = World::open(1, 12, vec![vec![0.0]; 12]).unwrap();
        let s = trip_stats(&w, &[line(&w, &[2, 3, 2]), line(&w, &[0, 1])], &["a".into(), "a".into()]);
        assert_eq!(s.trips[0].manhattan_m, 0.0);
        assert_eq!(s.zero_distance_excluded, 1);
        assert_eq!(s.by_label["a"].trips, 2);
        assert_eq!(s.by_label["a"].log_trips, 1);
        assert_eq!(s.by_label["a"].mean_log10, 2.0);
    }

    #[test]
    fn log_mean_of_100_and_1000() {
        let w = World::open(1, 12, vec![vec![0.0]; 12]).unwrap().with_cell_size(100.0).unwrap();
        let short = line(&w, &[0, 1]);
        let cells: Vec<usize> = (0..=10).collect();
        let long = line(&w, &cells);
        let s = trip_stats(&w, &[short, long], &["w".into(), "w".into()]);
        assert!((s.by_label["w"].mean_log10 - 2.5).abs() < 1e-12);
        assert!((s.by_label["w"].var_log10 - 0.25).abs() < 1e-12);
        assert_eq!(s.decision_histogram.values().sum::<usize>(), 2);
        assert!((s.decision_pmf.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn period_labels() {
        let tue = chrono::NaiveDate::from_ymd_opt(2017, 11, 7).unwrap().and_hms_opt(8, 0, 0).unwrap();
        assert_eq!(period_label(tue), "workday");
        assert_eq!(period_label(tue + chrono::Duration::days(4)), "weekend");
    }
}
