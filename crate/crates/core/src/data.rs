//! Staypoints, trips and the train/test period split.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamps are UTC epoch seconds throughout.
pub type Timestamp = i64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub individual_id: String,
    pub lat: f64,
    pub lon: f64,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
}

impl StayPoint {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("latitude {} out of range", self.lat));
        }
        if !self.lon.is_finite() || !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("longitude {} out of range", self.lon));
        }
        if self.t_end < self.t_start {
            return Err(format!("t_end {} before t_start {}", self.t_end, self.t_start));
        }
        Ok(())
    }

    pub fn duration(&self) -> i64 {
        self.t_end - self.t_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub individual_id: String,
    pub trip_id: u32,
    pub staypoints: Vec<StayPoint>,
}

impl Trip {
    pub fn len(&self) -> usize {
        self.staypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.staypoints.is_empty()
    }

    pub fn start(&self) -> Timestamp {
        self.staypoints[0].t_start
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeriodSplit {
    pub boundary: Timestamp,
    pub train_trips: Vec<Trip>,
    pub test_trips: Vec<Trip>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    /// Per-individual staypoints sorted by `t_start`.
    pub by_individual: BTreeMap<String, Vec<StayPoint>>,
    pub rejections: Vec<Rejection>,
}

impl Ingested {
    pub fn staypoint_count(&self) -> usize {
        self.by_individual.values().map(Vec::len).sum()
    }
}

pub const STAYPOINT_HEADER: [&str; 5] = ["individual_id", "lat", "lon", "t_start", "t_end"];

/// Parses an ISO-8601 timestamp or integer epoch seconds.
pub fn parse_timestamp(raw: &str) -> std::result::Result<Timestamp, String> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return Ok(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(naive.and_utc().timestamp());
        }
    }
    Err(format!("unparseable timestamp `{raw}`"))
}

/// Reads delimited staypoint rows. Bad rows are rejected individually and
/// reported with their 1-based line number (the header is line 1).
pub fn ingest_staypoints<R: Read>(source: R, delimiter: u8) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut out = Ingested::default();
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(Error::Parse(format!("staypoint header: {e}"))),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(out);
    }
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(STAYPOINT_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("staypoint header missing column `{name}`")))?;
    }

    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                out.rejections.push(Rejection { line, reason: format!("malformed row: {e}") });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&record, &cols) {
            Ok(sp) => out.by_individual.entry(sp.individual_id.clone()).or_default().push(sp),
            Err(reason) => out.rejections.push(Rejection { line, reason }),
        }
    }

    for points in out.by_individual.values_mut() {
        points.sort_by_key(|p| (p.t_start, p.t_end));
    }
    Ok(out)
}

fn parse_row(record: &csv::StringRecord, cols: &[usize; 5]) -> std::result::Result<StayPoint, String> {
    let field = |i: usize| record.get(cols[i]).ok_or_else(|| format!("missing field `{}`", STAYPOINT_HEADER[i]));
    let individual_id = field(0)?.to_string();
    if individual_id.is_empty() {
        return Err("empty individual_id".into());
    }
    let lat: f64 = field(1)?.parse().map_err(|_| format!("unparseable latitude `{}`", field(1).unwrap_or("")))?;
    let lon: f64 = field(2)?.parse().map_err(|_| format!("unparseable longitude `{}`", field(2).unwrap_or("")))?;
    let t_start = parse_timestamp(field(3)?)?;
    let t_end = parse_timestamp(field(4)?)?;
    let sp = StayPoint { individual_id, lat, lon, t_start, t_end };
    sp.validate()?;
    Ok(sp)
}

pub fn write_rejections<W: Write>(sink: W, rejections: &[Rejection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["line", "reason"]).map_err(csv_err)?;
    for r in rejections {
        w.write_record([r.line.to_string(), r.reason.clone()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn write_staypoints<W: Write>(sink: W, points: &[StayPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(STAYPOINT_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.individual_id.clone(),
            format!("{:.7}", p.lat),
            format!("{:.7}", p.lon),
            p.t_start.to_string(),
            p.t_end.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentParams {
    /// Largest gap (seconds, end-to-start) that keeps two staypoints in one trip.
    pub gap_threshold_secs: i64,
    pub min_trip_length: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self { gap_threshold_secs: 1800, min_trip_length: 4 }
    }
}

/// A staypoint dropped because it started before its predecessor ended.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapFlag {
    pub kept: StayPoint,
    pub dropped: StayPoint,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segmentation {
    pub trips: Vec<Trip>,
    pub overlaps: Vec<OverlapFlag>,
}

/// Splits one individual's time-ordered staypoints into trips.
///
/// A gap `t_start[i+1] - t_end[i]` strictly greater than the threshold starts
/// a new segment; segments shorter than `min_trip_length` are discarded.
/// Overlapping staypoints keep the earlier point.
pub fn segment_trips(staypoints: &[StayPoint], params: SegmentParams) -> Result<Segmentation> {
    if staypoints.windows(2).any(|w| w[1].t_start < w[0].t_start) {
        return Err(Error::InvalidInput("staypoints must be sorted by t_start".into()));
    }
    let mut out = Segmentation::default();
    let mut current: Vec<StayPoint> = Vec::new();
    let mut next_id = 0u32;

    let mut flush = |current: &mut Vec<StayPoint>, out: &mut Segmentation| {
        if current.len() >= params.min_trip_length.max(1) {
            out.trips.push(Trip {
                individual_id: current[0].individual_id.clone(),
                trip_id: next_id,
                staypoints: std::mem::take(current),
            });
            next_id += 1;
        } else {
            current.clear();
        }
    };

    for sp in staypoints {
        if let Some(last) = current.last() {
            let gap = sp.t_start - last.t_end;
            if gap < 0 {
                out.overlaps.push(OverlapFlag { kept: last.clone(), dropped: sp.clone() });
                continue;
            }
            if gap > params.gap_threshold_secs {
                flush(&mut current, &mut out);
            }
        }
        current.push(sp.clone());
    }
    flush(&mut current, &mut out);
    Ok(out)
}

/// Assigns each trip by the start of its first staypoint: before the
/// boundary goes to training, at or after it to testing.
pub fn split_periods(trips: Vec<Trip>, boundary: Timestamp) -> PeriodSplit {
    let (train_trips, test_trips) = trips.into_iter().partition(|t| t.start() < boundary);
    PeriodSplit { boundary, train_trips, test_trips }
}

pub const TRIP_HEADER: [&str; 7] = ["individual_id", "trip_id", "seq", "lat", "lon", "t_start", "t_end"];

pub fn write_trips<W: Write>(sink: W, trips: &[Trip]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRIP_HEADER).map_err(csv_err)?;
    for trip in trips {
        for (seq, p) in trip.staypoints.iter().enumerate() {
            w.write_record([
                trip.individual_id.clone(),
                trip.trip_id.to_string(),
                seq.to_string(),
                format!("{:.7}", p.lat),
                format!("{:.7}", p.lon),
                p.t_start.to_string(),
                p.t_end.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn read_trips<R: Read>(source: R) -> Result<Vec<Trip>> {
    #[derive(Deserialize)]
    struct Row {
        individual_id: String,
        trip_id: u32,
        seq: usize,
        lat: f64,
        lon: f64,
        t_start: i64,
        t_end: i64,
    }
    let mut reader = csv::Reader::from_reader(source);
    let mut trips: Vec<Trip> = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(csv_err)?;
        let sp = StayPoint {
            individual_id: row.individual_id.clone(),
            lat: row.lat,
            lon: row.lon,
            t_start: row.t_start,
            t_end: row.t_end,
        };
        match trips.last_mut() {
            Some(t) if t.individual_id == row.individual_id && t.trip_id == row.trip_id => {
                if row.seq != t.staypoints.len() {
                    return Err(Error::Parse(format!("trip {}:{} out of sequence", row.individual_id, row.trip_id)));
                }
                t.staypoints.push(sp)
            }
            _ => {
                if row.seq != 0 {
                    return Err(Error::Parse(format!("trip {}:{} out of sequence", row.individual_id, row.trip_id)));
                }
                trips.push(Trip { individual_id: row.individual_id, trip_id: row.trip_id, staypoints: vec![sp] })
            }
        }
    }
    Ok(trips)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
