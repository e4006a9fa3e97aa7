//! Trajectory CSV parsing and stay-point extraction.
//!
//! A stay point is a run of consecutive fixes that all lie within `δ` metres
//! of the run's first fix (the anchor) and that lasts at least `θ` seconds.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default spatial radius of a stay point, metres.
pub const DEFAULT_STAY_RADIUS_M: f64 = 200.0;
/// Default minimum dwell, seconds.
pub const DEFAULT_STAY_DURATION_S: i64 = 600;
/// Default maximal reporting gap inside a stay window, seconds.
pub const DEFAULT_MAX_GAP_S: i64 = 1_800;

/// Fraction of malformed rows tolerated before parsing fails.
const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub truck_id: String,
    /// UTC epoch seconds.
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

impl TrajectoryPoint {
    pub fn new(truck_id: impl Into<String>, t: i64, lat: f64, lon: f64) -> Self {
        Self {
            truck_id: truck_id.into(),
            t,
            lat,
            lon,
        }
    }

    pub fn coord(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub truck_id: String,
    pub t_start: i64,
    pub t_end: i64,
    pub anchor_lat: f64,
    pub anchor_lon: f64,
    pub centroid_lat: f64,
    pub centroid_lon: f64,
    pub n_points: usize,
}

impl StayPoint {
    pub fn duration(&self) -> i64 {
        self.t_end - self.t_start
    }
}

/// All fixes of one truck, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub truck_id: String,
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrajectoryFormat {
    /// `truck_id,timestamp,lat,lon` with a header row.
    #[default]
    Csv,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrajectories {
    /// One track per truck, ordered by truck id.
    pub tracks: Vec<Track>,
    /// 1-based data row numbers (header excluded) that failed to parse.
    pub rejected_rows: Vec<usize>,
    pub total_rows: usize,
}

impl ParsedTrajectories {
    pub fn n_points(&self) -> usize {
        self.tracks.iter().map(|t| t.points.len()).sum()
    }
}

pub fn parse_trajectories(path: &Path, format: TrajectoryFormat) -> Result<ParsedTrajectories> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trajectories_from_reader(file, format).map_err(|e| match e {
        Error::TooManyMalformed {
            malformed,
            total,
            rows,
            ..
        } => Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed,
            total,
            rows,
        },
        other => other,
    })
}

pub fn parse_trajectories_from_reader<R: Read>(
    reader: R,
    format: TrajectoryFormat,
) -> Result<ParsedTrajectories> {
    let TrajectoryFormat::Csv = format;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut by_truck: BTreeMap<String, Vec<TrajectoryPoint>> = BTreeMap::new();
    let mut rejected_rows = Vec::new();
    let mut total_rows = 0;
    for (idx, record) in rdr.records().enumerate() {
        total_rows += 1;
        let row = idx + 1;
        let parsed = record.ok().and_then(|r| parse_row(&r));
        match parsed {
            Some(p) => by_truck.entry(p.truck_id.clone()).or_default().push(p),
            None => rejected_rows.push(row),
        }
    }

    if total_rows > 0 && rejected_rows.len() as f64 > MAX_MALFORMED_FRACTION * total_rows as f64 {
        return Err(Error::TooManyMalformed {
            path: Default::default(),
            malformed: rejected_rows.len(),
            total: total_rows,
            rows: rejected_rows.iter().copied().take(20).collect(),
        });
    }
    if !rejected_rows.is_empty() {
        log::warn!("{} malformed trajectory rows skipped", rejected_rows.len());
    }

    let tracks = by_truck
        .into_iter()
        .map(|(truck_id, mut points)| {
            // stable: duplicate timestamps keep file order
            points.sort_by_key(|p| p.t);
            Track { truck_id, points }
        })
        .collect();
    Ok(ParsedTrajectories {
        tracks,
        rejected_rows,
        total_rows,
    })
}

fn parse_row(r: &csv::StringRecord) -> Option<TrajectoryPoint> {
    if r.len() != 4 {
        return None;
    }
    let truck_id = r.get(0)?;
    if truck_id.is_empty() {
        return None;
    }
    let t = parse_timestamp(r.get(1)?)?;
    let lat: f64 = r.get(2)?.parse().ok()?;
    let lon: f64 = r.get(3)?.parse().ok()?;
    if !valid_coordinate(lat, lon) {
        return None;
    }
    Some(TrajectoryPoint::new(truck_id, t, lat, lon))
}

/// Epoch seconds or ISO-8601 with an explicit zone.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    DateTime::parse_from_rfc3339(s).ok().map(|dt| dt.timestamp())
}

pub fn valid_coordinate(lat: f64, lon: f64) -> bool {
    lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)
}

pub fn write_trajectories<W: Write>(writer: W, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["truck_id", "timestamp", "lat", "lon"])?;
    for p in points {
        w.write_record([
            p.truck_id.as_str(),
            &p.t.to_string(),
            &format!("{:.7}", p.lat),
            &format!("{:.7}", p.lon),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trajectory writer>", e))?;
    Ok(())
}

/// Great-circle distance in metres.
pub fn haversine(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (lat1, lon1) = (p.0.to_radians(), p.1.to_radians());
    let (lat2, lon2) = (q.0.to_radians(), q.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StayParams {
    /// δ, metres.
    pub max_distance_m: f64,
    /// θ, seconds.
    pub min_duration_s: i64,
    /// A reporting gap longer than this ends the candidate window. `None` disables.
    pub max_gap_s: Option<i64>,
}

impl Default for StayParams {
    fn default() -> Self {
        Self {
            max_distance_m: DEFAULT_STAY_RADIUS_M,
            min_duration_s: DEFAULT_STAY_DURATION_S,
            max_gap_s: Some(DEFAULT_MAX_GAP_S),
        }
    }
}

impl StayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_distance_m > 0.0) {
            return Err(Error::InvalidParameter("stay radius must be > 0".into()));
        }
        if self.min_duration_s <= 0 {
            return Err(Error::InvalidParameter("stay duration must be > 0".into()));
        }
        if matches!(self.max_gap_s, Some(g) if g <= 0) {
            return Err(Error::InvalidParameter("max gap must be > 0".into()));
        }
        Ok(())
    }
}

/// Anchor-based forward scan over one truck's time-sorted fixes.
///
/// From anchor `i` the window grows while the next fix stays within
/// `max_distance_m` of the anchor (and no reporting gap exceeds `max_gap_s`).
/// If the maximal window lasts at least `min_duration_s` it is emitted and the
/// scan resumes right after it; otherwise the anchor moves forward by one.
pub fn detect_stay_points(points: &[TrajectoryPoint], params: &StayParams) -> Result<Vec<StayPoint>> {
    params.validate()?;
    let n = points.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let anchor = points[i].coord();
        let mut j = i + 1;
        while j < n
            && haversine(anchor, points[j].coord()) <= params.max_distance_m
            && params.max_gap_s.is_none_or(|g| points[j].t - points[j - 1].t <= g)
        {
            j += 1;
        }
        let last = j - 1;
        if last > i && points[last].t - points[i].t >= params.min_duration_s {
            out.push(make_stay_point(&points[i..=last]));
            i = j;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Builds a stay point from its member fixes (anchor = first member).
pub fn make_stay_point(members: &[TrajectoryPoint]) -> StayPoint {
    let first = &members[0];
    let last = &members[members.len() - 1];
    let n = members.len() as f64;
    let (sum_lat, sum_lon) = members
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.lat, b + p.lon));
    StayPoint {
        truck_id: first.truck_id.clone(),
        t_start: first.t,
        t_end: last.t,
        anchor_lat: first.lat,
        anchor_lon: first.lon,
        centroid_lat: sum_lat / n,
        centroid_lon: sum_lon / n,
        n_points: members.len(),
    }
}

/// Runs the detector over every track; output is ordered by truck then time.
pub fn detect_all(tracks: &[Track], params: &StayParams) -> Result<Vec<StayPoint>> {
    let mut out = Vec::new();
    for track in tracks {
        out.extend(detect_stay_points(&track.points, params)?);
    }
    Ok(out)
}

pub fn write_stay_points<W: Write>(writer: W, stays: &[StayPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in stays {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<stay point writer>", e))?;
    Ok(())
}

pub fn read_stay_points<R: Read>(reader: R) -> Result<Vec<StayPoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(spec: &[(i64, f64, f64)]) -> Vec<TrajectoryPoint> {
        spec.iter()
            .map(|&(t, lat, lon)| TrajectoryPoint::new("a", t, lat, lon))
            .collect()
    }

    #[test]
    fn haversine_identity_and_degree_arc() {
        assert_eq!(haversine((30.6, 104.0), (30.6, 104.0)), 0.0);
        let d = haversine((0.0, 0.0), (0.0, 1.0));
        // R * pi / 180
        assert!((d - 111_194.93).abs() < 10.0, "{d}");
    }

    #[test]
    fn haversine_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = (rng.gen_range(-90.0..90.0), rng.gen_range(-180.0..180.0));
            let q = (rng.gen_range(-90.0..90.0), rng.gen_range(-180.0..180.0));
            assert_eq!(haversine(p, q), haversine(q, p));
            assert!(haversine(p, q) >= 0.0);
        }
    }

    #[test]
    fn parses_and_sorts_one_truck() {
        let csv = "truck_id,timestamp,lat,lon\nt1,300,30.0,104.0\nt1,100,30.0,104.0\nt1,200,30.0,104.0\n";
        let parsed = parse_trajectories_from_reader(csv.as_bytes(), TrajectoryFormat::Csv).unwrap();
        assert_eq!(parsed.tracks.len(), 1);
        let ts: Vec<i64> = parsed.tracks[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![100, 200, 300]);
        assert!(parsed.rejected_rows.is_empty());
    }

    #[test]
    fn iso_timestamps_with_zone() {
        assert_eq!(parse_timestamp("1970-01-01T00:01:00Z"), Some(60));
        assert_eq!(parse_timestamp("1970-01-01T08:00:00+08:00"), Some(0));
        assert_eq!(parse_timestamp("notatime"), None);
    }

    #[test]
    fn one_bad_row_among_hundred_is_rejected_not_fatal() {
        let mut csv = String::from("truck_id,timestamp,lat,lon\n");
        for i in 0..50 {
            csv.push_str(&format!("t1,{},30.0,104.0\n", i * 30));
        }
        csv.push_str("x,notatime,1,2\n");
        for i in 50..100 {
            csv.push_str(&format!("t2,{},30.0,104.0\n", i * 30));
        }
        let parsed = parse_trajectories_from_reader(csv.as_bytes(), TrajectoryFormat::Csv).unwrap();
        assert_eq!(parsed.n_points(), 100);
        assert_eq!(parsed.rejected_rows, vec![51]);
        assert_eq!(parsed.total_rows, 101);
    }

    #[test]
    fn mostly_malformed_file_fails_with_rows() {
        let csv = "truck_id,timestamp,lat,lon\nt1,1,30,104\nt1,x,30,104\nt1,2,95,104\n";
        let err = parse_trajectories_from_reader(csv.as_bytes(), TrajectoryFormat::Csv).unwrap_err();
        match err {
            Error::TooManyMalformed { malformed, rows, .. } => {
                assert_eq!(malformed, 2);
                assert_eq!(rows, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn stationary_truck_gives_one_stay() {
        let p = pts(&[(0, 30.0, 104.0), (180, 30.0, 104.0), (360, 30.0, 104.0), (540, 30.0, 104.0), (720, 30.0, 104.0)]);
        let stays = detect_stay_points(&p, &StayParams::default()).unwrap();
        assert_eq!(stays.len(), 1);
        assert_eq!(stays[0].n_points, 5);
        assert_eq!(stays[0].duration(), 720);
    }

    #[test]
    fn short_dwell_is_not_a_stay() {
        let p = pts(&[(0, 30.0, 104.0), (300, 30.0, 104.0)]);
        assert!(detect_stay_points(&p, &StayParams::default()).unwrap().is_empty());
        assert!(detect_stay_points(&[], &StayParams::default()).unwrap().is_empty());
    }

    #[test]
    fn long_gap_splits_window() {
        let p = pts(&[(0, 30.0, 104.0), (400, 30.0, 104.0), (4000, 30.0, 104.0), (4300, 30.0, 104.0)]);
        assert!(detect_stay_points(&p, &StayParams::default()).unwrap().is_empty());
        let no_gap = StayParams {
            max_gap_s: None,
            ..Default::default()
        };
        assert_eq!(detect_stay_points(&p, &no_gap).unwrap().len(), 1);
    }

    #[test]
    fn resumes_after_window() {
        // dwell, move 1 km, dwell again
        let mut spec = vec![];
        for i in 0..25 {
            spec.push((i * 30, 30.0, 104.0));
        }
        for i in 25..50 {
            spec.push((i * 30, 30.01, 104.0));
        }
        let stays = detect_stay_points(&pts(&spec), &StayParams::default()).unwrap();
        assert_eq!(stays.len(), 2);
        assert!(stays[0].t_end < stays[1].t_start);
        assert_eq!(stays[1].anchor_lat, 30.01);
    }

    #[test]
    fn rejects_bad_params() {
        let bad = StayParams {
            max_distance_m: 0.0,
            ..Default::default()
        };
        assert!(detect_stay_points(&[], &bad).is_err());
    }

    #[test]
    fn stay_point_csv_header() {
        let s = make_stay_point(&pts(&[(0, 30.0, 104.0), (700, 30.0, 104.0)]));
        let mut buf = Vec::new();
        write_stay_points(&mut buf, std::slice::from_ref(&s)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "truck_id,t_start,t_end,anchor_lat,anchor_lon,centroid_lat,centroid_lon,n_points\n"
        ));
        assert_eq!(read_stay_points(buf.as_slice()).unwrap(), vec![s]);
    }
}
