//! Spatial semantics: per-category feature counts in cumulative buffers
//! around a staypoint, aggregated over an H3 cell index.

pub mod category;
pub mod index;

use std::collections::HashMap;

use h3o::{CellIndex, LatLng};

pub use category::{CategoryMapping, DEFAULT_CATEGORIES};
pub use index::{build_index, feature_cells, read_geojson, write_geojson, Coord, GeoFeature, Geometry, SpatialFeatureIndex};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const DEFAULT_RADII_M: [f64; 3] = [500.0, 1000.0, 2000.0];
pub const SPATIAL_DIM: usize = 39;

pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Rows are radii (ascending), columns categories. Each row counts every
/// cell within its radius, so rows are cumulative.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferCountMatrix {
    pub radii: Vec<f64>,
    pub values: Vec<Vec<u32>>,
}

impl BufferCountMatrix {
    pub fn zeros(radii: &[f64], n_categories: usize) -> Self {
        Self { radii: radii.to_vec(), values: vec![vec![0; n_categories]; radii.len()] }
    }
}

pub fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::InvalidInput("buffer radii list is empty".into()));
    }
    if radii.iter().any(|r| !r.is_finite() || *r <= 0.0) || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(format!("buffer radii must be positive and strictly increasing: {radii:?}")));
    }
    Ok(())
}

const BUCKET_DEG: f64 = 0.02;
const LON_BUCKETS: i64 = (360.0 / BUCKET_DEG) as i64;

/// Read-only query structure over an index: non-empty cell centers
/// bucketed on a coarse lat/lon grid so a buffer query visits only nearby
/// cells.
pub struct BufferQuery<'a> {
    index: &'a SpatialFeatureIndex,
    centers: Vec<(f64, f64, CellIndex)>,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

fn bucket_of(lat: f64, lon: f64) -> (i64, i64) {
    ((lat / BUCKET_DEG).floor() as i64, ((lon + 180.0) / BUCKET_DEG).floor() as i64 % LON_BUCKETS)
}

impl<'a> BufferQuery<'a> {
    pub fn new(index: &'a SpatialFeatureIndex) -> Self {
        let mut cells: Vec<CellIndex> = index.counts.keys().copied().collect();
        cells.sort_unstable();
        let mut centers = Vec::with_capacity(cells.len());
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for cell in cells {
            let ll = LatLng::from(cell);
            buckets.entry(bucket_of(ll.lat(), ll.lng())).or_default().push(centers.len() as u32);
            centers.push((ll.lat(), ll.lng(), cell));
        }
        Self { index, centers, buckets }
    }

    pub fn index(&self) -> &SpatialFeatureIndex {
        self.index
    }

    /// Per-radius category counts over cells whose center lies within the
    /// great-circle radius of `(lat, lon)`.
    pub fn counts(&self, lat: f64, lon: f64, radii: &[f64]) -> Result<BufferCountMatrix> {
        check_radii(radii)?;
        let mut m = BufferCountMatrix::zeros(radii, self.index.n_categories());
        let max_r = *radii.last().expect("non-empty radii");
        self.visit_candidates(lat, lon, max_r, |(clat, clon, cell)| {
            let d = haversine_m(lat, lon, clat, clon);
            if d > max_r {
                return;
            }
            let counts = &self.index.counts[&cell];
            for (row, r) in m.values.iter_mut().zip(radii) {
                if d <= *r {
                    for (acc, v) in row.iter_mut().zip(counts) {
                        *acc += v;
                    }
                }
            }
        });
        Ok(m)
    }

    fn visit_candidates(&self, lat: f64, lon: f64, radius: f64, mut f: impl FnMut((f64, f64, CellIndex))) {
        // one extra bucket of slack on every side absorbs the bucket
        // quantization; the exact distance test happens in the caller
        let dlat = (radius / EARTH_RADIUS_M).to_degrees();
        let lat_lo = ((lat - dlat) / BUCKET_DEG).floor() as i64 - 1;
        let lat_hi = ((lat + dlat) / BUCKET_DEG).floor() as i64 + 1;
        let max_abs_lat = (lat.abs() + dlat).min(90.0);
        let cos = max_abs_lat.to_radians().cos();
        let dlon = if cos < 1e-6 { 360.0 } else { dlat / cos };
        let lon_span: Vec<i64> = if dlon >= 180.0 {
            (0..LON_BUCKETS).collect()
        } else {
            let lo = ((lon + 180.0 - dlon) / BUCKET_DEG).floor() as i64 - 1;
            let hi = ((lon + 180.0 + dlon) / BUCKET_DEG).floor() as i64 + 1;
            let mut span: Vec<i64> = (lo..=hi).map(|b| b.rem_euclid(LON_BUCKETS)).collect();
            span.sort_unstable();
            span.dedup();
            span
        };
        for bl in lat_lo..=lat_hi {
            for &bo in &lon_span {
                if let Some(ids) = self.buckets.get(&(bl, bo)) {
                    for &i in ids {
                        f(self.centers[i as usize]);
                    }
                }
            }
        }
    }
}

/// One-off buffer query; use [`BufferQuery`] for batches.
pub fn buffer_counts(index: &SpatialFeatureIndex, lat: f64, lon: f64, radii: &[f64]) -> Result<BufferCountMatrix> {
    BufferQuery::new(index).counts(lat, lon, radii)
}

/// Row-major flatten followed by `ln(1 + x)`.
pub fn normalize_spatial(matrix: &BufferCountMatrix) -> Vec<f64> {
    matrix.values.iter().flatten().map(|&v| (v as f64).ln_1p()).collect()
}
