use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lon: f64,
    pub lat: f64,
    /// Epoch milliseconds.
    pub t_ms: i64,
}

/// One bike-share order as recorded by the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrip {
    pub order_id: String,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub points: Vec<GpsPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripFormat {
    Csv,
    Json,
}

impl TripFormat {
    pub fn from_path(path: &Path) -> Option<TripFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(TripFormat::Csv),
            "json" => Some(TripFormat::Json),
            _ => None,
        }
    }
}

/// A record that could not be turned into a [`RawTrip`]. `line` is the
/// 1-based file line for CSV and the 1-based array position for JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub order_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub trips: Vec<RawTrip>,
    pub errors: Vec<RecordError>,
}

const TIME_FORMATS: [&str; 2] = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"];

fn parse_time(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("unparseable timestamp {s:?}"))
}

/// Parses the operator's point encoding: `lon,lat;epoch_ms` entries joined by
/// `#`. Empty entries (e.g. a trailing `#`) are skipped.
fn parse_points(s: &str) -> std::result::Result<Vec<GpsPoint>, String> {
    let mut points = Vec::new();
    for chunk in s.split('#') {
        let chunk = chunk.trim().trim_end_matches(';');
        if chunk.is_empty() {
            continue;
        }
        let (coords, t) = chunk
            .split_once(';')
            .ok_or_else(|| format!("point {chunk:?} lacks a timestamp"))?;
        let (lon, lat) = coords
            .split_once(',')
            .ok_or_else(|| format!("point {chunk:?} lacks a latitude"))?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad coordinate {v:?}: {e}"));
        points.push(GpsPoint {
            lon: num(lon)?,
            lat: num(lat)?,
            t_ms: t.trim().parse().map_err(|e| format!("bad timestamp {t:?}: {e}"))?,
        });
    }
    Ok(points)
}

fn validate(
    order_id: String,
    start: &str,
    end: &str,
    points: Vec<GpsPoint>,
) -> std::result::Result<RawTrip, String> {
    let start_time = parse_time(start)?;
    let end_time = parse_time(end)?;
    if points.len() < 2 {
        return Err(format!("too few points ({})", points.len()));
    }
    if points.iter().any(|p| !(p.lon.is_finite() && p.lat.is_finite())) {
        return Err("non-finite coordinate".into());
    }
    if points.windows(2).any(|w| w[1].t_ms < w[0].t_ms) {
        return Err("points are not time-ordered".into());
    }
    Ok(RawTrip { order_id, start_time, end_time, points })
}

#[derive(Deserialize)]
struct CsvRow {
    order_id: String,
    start_time: String,
    end_time: String,
    points: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    order_id: serde_json::Value,
    start_time: String,
    end_time: String,
    points: Vec<(f64, f64, i64)>,
}

pub fn parse_trips(path: &Path, format: TripFormat) -> Result<ParseReport> {
    let content = std::fs::read_to_string(path)?;
    parse_trips_str(&content, format)
}

/// Parses trip records. Malformed records are collected in
/// [`ParseReport::errors`] rather than dropped silently; a file whose
/// header or top-level structure is wrong is an error.
pub fn parse_trips_str(content: &str, format: TripFormat) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    if content.trim().is_empty() {
        return Ok(report);
    }
    match format {
        TripFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(content.as_bytes());
            let headers = reader.headers()?.clone();
            for required in ["order_id", "start_time", "end_time", "points"] {
                if !headers.iter().any(|h| h == required) {
                    return Err(CoreError::Invalid(format!("CSV header lacks column {required:?}")));
                }
            }
            for rec in reader.records() {
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                        report.errors.push(RecordError { line, order_id: None, reason: e.to_string() });
                        continue;
                    }
                };
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                let row: CsvRow = match rec.deserialize(Some(&headers)) {
                    Ok(r) => r,
                    Err(e) => {
                        report.errors.push(RecordError { line, order_id: None, reason: e.to_string() });
                        continue;
                    }
                };
                let outcome = parse_points(&row.points)
                    .and_then(|pts| validate(row.order_id.clone(), &row.start_time, &row.end_time, pts));
                match outcome {
                    Ok(trip) => report.trips.push(trip),
                    Err(reason) => report.errors.push(RecordError {
                        line,
                        order_id: Some(row.order_id),
                        reason,
                    }),
                }
            }
        }
        TripFormat::Json => {
            let rows: Vec<serde_json::Value> = serde_json::from_str(content)?;
            for (i, value) in rows.into_iter().enumerate() {
                let line = i + 1;
                let row: JsonRow = match serde_json::from_value(value) {
                    Ok(r) => r,
                    Err(e) => {
                        report.errors.push(RecordError { line, order_id: None, reason: e.to_string() });
                        continue;
                    }
                };
                let order_id = match row.order_id {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                let points = row
                    .points
                    .into_iter()
                    .map(|(lon, lat, t_ms)| GpsPoint { lon, lat, t_ms })
                    .collect();
                match validate(order_id.clone(), &row.start_time, &row.end_time, points) {
                    Ok(trip) => report.trips.push(trip),
                    Err(reason) => report.errors.push(RecordError { line, order_id: Some(order_id), reason }),
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Datelike, Timelike};

    const TABLE_ROW: &str = "order_id,start_time,end_time,points\n\
        1628190,2017-11-07 08:16:41.0,2017-11-07 08:31:07.0,\"114.267402,22.709543;1510013805840#114.267402,22.709543;1510013810840#114.2478,22.7001;1510014667000\"\n";

    #[test]
    fn parses_operator_record() {
        let report = parse_trips_str(TABLE_ROW, TripFormat::Csv).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let trip = &report.trips[0];
        assert_eq!(trip.order_id, "1628190");
        assert_eq!(
            (trip.start_time.year(), trip.start_time.month(), trip.start_time.day()),
            (2017, 11, 7)
        );
        assert_eq!(
            (trip.start_time.hour(), trip.start_time.minute(), trip.start_time.second()),
            (8, 16, 41)
        );
        assert_eq!(trip.points.len(), 3);
        assert_eq!(trip.points[0].lon, 114.267402);
        assert_eq!(trip.points[0].t_ms, 1510013805840);
    }

    #[test]
    fn empty_file_is_empty() {
        let r = parse_trips_str("", TripFormat::Csv).unwrap();
        assert!(r.trips.is_empty() && r.errors.is_empty());
        let r = parse_trips_str("[]", TripFormat::Json).unwrap();
        assert!(r.trips.is_empty() && r.errors.is_empty());
    }

    #[test]
    fn single_point_is_rejected_with_line() {
        let csv = "order_id,start_time,end_time,points\n\
            a,2017-11-07 08:00:00,2017-11-07 08:10:00,\"114.1,22.7;1#114.2,22.7;2\"\n\
            b,2017-11-07 08:00:00,2017-11-07 08:10:00,\"114.1,22.7;1\"\n";
        let r = parse_trips_str(csv, TripFormat::Csv).unwrap();
        assert_eq!(r.trips.len(), 1);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].line, 3);
        assert!(r.errors[0].reason.contains("too few points"));
    }

    #[test]
    fn json_format() {
        let json = r#"[
            {"order_id": 1628190, "start_time": "2017-11-07 08:16:41.0", "end_time": "2017-11-07 08:31:07.0",
             "points": [[114.267402, 22.709543, 1510013805840], [114.2478, 22.7001, 1510014667000]]},
            {"order_id": "x", "start_time": "nope", "end_time": "2017-11-07 08:31:07.0", "points": []}
        ]"#;
        let r = parse_trips_str(json, TripFormat::Json).unwrap();
        assert_eq!(r.trips.len(), 1);
        assert_eq!(r.trips[0].order_id, "1628190");
        assert_eq!(r.errors[0].line, 2);
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        assert!(parse_trips_str("id,when\n1,2\n", TripFormat::Csv).is_err());
        assert!(parse_trips_str("{\"not\": \"an array\"}", TripFormat::Json).is_err());
    }

    #[test]
    fn out_of_order_points_are_reported() {
        let csv = "order_id,start_time,end_time,points\n\
            a,2017-11-07 08:00:00,2017-11-07 08:10:00,\"114.1,22.7;5#114.2,22.7;2\"\n";
        let r = parse_trips_str(csv, TripFormat::Csv).unwrap();
        assert!(r.errors[0].reason.contains("time-ordered"));
    }
}
