//! Per-trip feature tensors and their on-disk form.
//!
//! `features.bin` layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "MOBFEAT\0"
//! version   u32      1
//! hdr_len   u32
//! header    JSON {"temporal_dim", "spatial_dim", "trips": [{"individual_id", "trip_id", "period", "t_start", "len"}]}
//! values    f64 per trip: len x temporal_dim, then len x spatial_dim
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Timestamp, Trip};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::TripFeatures;
use crate::profile::{IndividualTrips, Period};
use crate::spatial::{normalize_spatial, BufferQuery};
use crate::temporal::{encode_temporal, TEMPORAL_DIM};

const MAGIC: &[u8; 8] = b"MOBFEAT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripKey {
    pub individual_id: String,
    pub trip_id: u32,
    pub period: Period,
    pub t_start: Timestamp,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub temporal_dim: usize,
    pub spatial_dim: usize,
    pub keys: Vec<TripKey>,
    pub trips: Vec<TripFeatures>,
}

pub fn trip_features(trip: &Trip, query: &BufferQuery<'_>, radii: &[f64], tz_offset_hours: f64) -> Result<TripFeatures> {
    let mut temporal = Vec::with_capacity(trip.len() * TEMPORAL_DIM);
    let mut spatial = Vec::new();
    for sp in &trip.staypoints {
        temporal.extend_from_slice(encode_temporal(sp, tz_offset_hours).as_slice());
        spatial.extend(normalize_spatial(&query.counts(sp.lat, sp.lon, radii)?));
    }
    Ok(TripFeatures::new(temporal, spatial, trip.len()))
}

impl FeatureSet {
    /// Computes features for both periods; trips keep their input order.
    pub fn compute(
        train: &[Trip],
        test: &[Trip],
        query: &BufferQuery<'_>,
        radii: &[f64],
        tz_offset_hours: f64,
        exec: Execution,
    ) -> Result<Self> {
        let tagged: Vec<(Period, &Trip)> = train
            .iter()
            .map(|t| (Period::Train, t))
            .chain(test.iter().map(|t| (Period::Test, t)))
            .collect();
        let trips = exec
            .map(&tagged, |(_, t)| trip_features(t, query, radii, tz_offset_hours))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let keys = tagged
            .iter()
            .map(|(period, t)| TripKey {
                individual_id: t.individual_id.clone(),
                trip_id: t.trip_id,
                period: *period,
                t_start: t.start(),
                len: t.len(),
            })
            .collect();
        Ok(Self { temporal_dim: TEMPORAL_DIM, spatial_dim: radii.len() * query.index().n_categories(), keys, trips })
    }

    pub fn period(&self, period: Period) -> Vec<&TripFeatures> {
        self.keys.iter().zip(&self.trips).filter(|(k, _)| k.period == period).map(|(_, t)| t).collect()
    }

    /// Trips of one period grouped by individual in id order, each group
    /// sorted by start time.
    pub fn by_individual(&self, period: Period) -> Vec<IndividualTrips<'_>> {
        let mut idx: Vec<usize> = (0..self.keys.len()).filter(|&i| self.keys[i].period == period).collect();
        idx.sort_by(|&a, &b| {
            let (ka, kb) = (&self.keys[a], &self.keys[b]);
            ka.individual_id.cmp(&kb.individual_id).then(ka.t_start.cmp(&kb.t_start)).then(ka.trip_id.cmp(&kb.trip_id))
        });
        let mut out: Vec<IndividualTrips<'_>> = Vec::new();
        for i in idx {
            let id = self.keys[i].individual_id.as_str();
            match out.last_mut() {
                Some(last) if last.individual_id == id => last.trips.push(&self.trips[i]),
                _ => out.push(IndividualTrips { individual_id: id, trips: vec![&self.trips[i]] }),
            }
        }
        out
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            temporal_dim: usize,
            spatial_dim: usize,
            trips: &'a [TripKey],
        }
        let header = serde_json::to_vec(&Header { temporal_dim: self.temporal_dim, spatial_dim: self.spatial_dim, trips: &self.keys })
            .map_err(|e| Error::Parse(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in &self.trips {
            for v in t.temporal.iter().chain(&t.spatial) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        sink.write_all(&buf).map_err(|e| Error::io("features", e))
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            temporal_dim: usize,
            spatial_dim: usize,
            trips: Vec<TripKey>,
        }
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes).map_err(|e| Error::io("features", e))?;
        let truncated = || Error::Parse("feature file truncated".into());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Parse("not a feature file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported feature file version {version}")));
        }
        let hdr_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(bytes.get(16..16 + hdr_len).ok_or_else(truncated)?)
            .map_err(|e| Error::Parse(format!("feature header: {e}")))?;
        let mut values = bytes[16 + hdr_len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut trips = Vec::with_capacity(header.trips.len());
        for key in &header.trips {
            let temporal: Vec<f64> = values.by_ref().take(key.len * header.temporal_dim).collect();
            let spatial: Vec<f64> = values.by_ref().take(key.len * header.spatial_dim).collect();
            if temporal.len() != key.len * header.temporal_dim || spatial.len() != key.len * header.spatial_dim || key.len == 0 {
                return Err(truncated());
            }
            trips.push(TripFeatures::new(temporal, spatial, key.len));
        }
        if values.next().is_some() {
            return Err(Error::Parse("trailing data in feature file".into()));
        }
        Ok(Self { temporal_dim: header.temporal_dim, spatial_dim: header.spatial_dim, keys: header.trips, trips })
    }
}
