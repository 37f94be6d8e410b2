use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use super::raw::RawTrip;
use super::Trajectory;
use crate::env::haversine_m;

/// Trip cleaning rules. A trip is kept only if every applicable rule passes;
/// rules whose inputs a trip lacks (e.g. speed for a bare trajectory) are
/// skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterRules {
    /// Minimum distinct cells traversed; the default keeps trips with more
    /// than five.
    pub min_segments: usize,
    pub max_speed_kmh: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub reject_coincident_od: bool,
    /// Keep trips starting in `[start_hour, end_hour)`; wraps past midnight
    /// when `start_hour > end_hour`.
    pub time_window: Option<(u32, u32)>,
    /// `Some(true)` keeps weekday trips only, `Some(false)` weekend only.
    pub weekday: Option<bool>,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_segments: 6,
            max_speed_kmh: 30.0,
            min_duration_s: 60.0,
            max_duration_s: 7200.0,
            reject_coincident_od: true,
            time_window: None,
            weekday: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewSegments,
    TooFast,
    TooShort,
    TooLong,
    CoincidentOd,
    OutsideTimeWindow,
    WrongDayType,
}

/// What a filter needs to know about a trip.
pub trait TripView {
    fn trip_id(&self) -> Option<&str> {
        None
    }
    fn segment_count(&self) -> Option<usize> {
        None
    }
    fn duration_s(&self) -> Option<f64> {
        None
    }
    fn mean_speed_kmh(&self) -> Option<f64> {
        None
    }
    fn start_time(&self) -> Option<NaiveDateTime> {
        None
    }
    fn od_coincident(&self) -> Option<bool> {
        None
    }
}

impl TripView for RawTrip {
    fn trip_id(&self) -> Option<&str> {
        Some(&self.order_id)
    }

    fn duration_s(&self) -> Option<f64> {
        Some((self.end_time - self.start_time).num_milliseconds() as f64 / 1000.0)
    }

    fn mean_speed_kmh(&self) -> Option<f64> {
        let dist: f64 = self
            .points
            .windows(2)
            .map(|w| haversine_m(w[0].lon, w[0].lat, w[1].lon, w[1].lat))
            .sum();
        let dur = self.duration_s()?;
        if dur <= 0.0 {
            return Some(if dist > 0.0 { f64::INFINITY } else { 0.0 });
        }
        Some(dist / dur * 3.6)
    }

    fn start_time(&self) -> Option<NaiveDateTime> {
        Some(self.start_time)
    }
}

impl TripView for Trajectory {
    fn trip_id(&self) -> Option<&str> {
        self.order_id.as_deref()
    }

    fn segment_count(&self) -> Option<usize> {
        Some(Trajectory::segment_count(self))
    }

    fn od_coincident(&self) -> Option<bool> {
        Some(self.origin() == self.destination())
    }
}

/// A raw trip together with its map-matched trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedTrip {
    pub raw: RawTrip,
    pub trajectory: Trajectory,
}

impl TripView for MatchedTrip {
    fn trip_id(&self) -> Option<&str> {
        Some(&self.raw.order_id)
    }
    fn segment_count(&self) -> Option<usize> {
        TripView::segment_count(&self.trajectory)
    }
    fn duration_s(&self) -> Option<f64> {
        self.raw.duration_s()
    }
    fn mean_speed_kmh(&self) -> Option<f64> {
        self.raw.mean_speed_kmh()
    }
    fn start_time(&self) -> Option<NaiveDateTime> {
        Some(self.raw.start_time)
    }
    fn od_coincident(&self) -> Option<bool> {
        self.trajectory.od_coincident()
    }
}

impl FilterRules {
    /// First failing rule, if any.
    pub fn check<T: TripView + ?Sized>(&self, trip: &T) -> Option<RejectReason> {
        if trip.segment_count().is_some_and(|n| n < self.min_segments) {
            return Some(RejectReason::TooFewSegments);
        }
        if self.reject_coincident_od && trip.od_coincident() == Some(true) {
            return Some(RejectReason::CoincidentOd);
        }
        if let Some(d) = trip.duration_s() {
            if d < self.min_duration_s {
                return Some(RejectReason::TooShort);
            }
            if d > self.max_duration_s {
                return Some(RejectReason::TooLong);
            }
        }
        if trip.mean_speed_kmh().is_some_and(|v| v > self.max_speed_kmh) {
            return Some(RejectReason::TooFast);
        }
        if let Some(start) = trip.start_time() {
            if let Some((lo, hi)) = self.time_window {
                let h = start.hour();
                let inside = if lo <= hi { h >= lo && h < hi } else { h >= lo || h < hi };
                if !inside {
                    return Some(RejectReason::OutsideTimeWindow);
                }
            }
            if let Some(want_weekday) = self.weekday {
                let is_weekday = !matches!(start.weekday(), Weekday::Sat | Weekday::Sun);
                if is_weekday != want_weekday {
                    return Some(RejectReason::WrongDayType);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub by_reason: BTreeMap<RejectReason, usize>,
    /// `(trip id, reason)` for every rejection, sorted by id.
    pub rejected: Vec<(String, RejectReason)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<T> {
    pub kept: Vec<T>,
    pub report: FilterReport,
}

/// Applies `rules` to every trip. Filtering is total: it never fails.
pub fn filter_trips<T: TripView>(trips: Vec<T>, rules: &FilterRules) -> FilterOutcome<T> {
    let mut report = FilterReport { input: trips.len(), ..Default::default() };
    let mut kept = Vec::new();
    for (i, trip) in trips.into_iter().enumerate() {
        match rules.check(&trip) {
            None => kept.push(trip),
            Some(reason) => {
                *report.by_reason.entry(reason).or_default() += 1;
                let id = trip.trip_id().map(str::to_owned).unwrap_or_else(|| format!("#{i}"));
                report.rejected.push((id, reason));
            }
        }
    }
    report.rejected.sort();
    report.kept = kept.len();
    FilterOutcome { kept, report }
}
