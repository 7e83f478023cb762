//! Hexagonal-cell feature index.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use geo::{Centroid, Coord as GeoCoord, Line, LineString, Polygon};
use h3o::geom::{ContainmentMode, PlotterBuilder, TilerBuilder};
use h3o::{CellIndex, LatLng, Resolution};
use serde_json::Value;

use super::category::CategoryMapping;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coord {
    pub lat: f64,
    pub lon: f64,
}

impl Coord {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    fn is_valid(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite() && (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }

    fn to_geo(self) -> GeoCoord {
        GeoCoord { x: self.lon, y: self.lat }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Point(Coord),
    Polyline(Vec<Coord>),
    Polygon { exterior: Vec<Coord>, holes: Vec<Vec<Coord>> },
    Multi(Vec<Geometry>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoFeature {
    pub geometry: Geometry,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    /// Position of the feature in its input collection.
    pub position: usize,
    pub reason: String,
}

pub fn resolution_from(level: u8) -> Result<Resolution> {
    Resolution::try_from(level).map_err(|_| Error::config("spatial.resolution", format!("{level} is not an H3 resolution (0-15)")))
}

fn validate_ring(ring: &[Coord], what: &str) -> std::result::Result<(), String> {
    let mut distinct: Vec<&Coord> = Vec::with_capacity(ring.len());
    for c in ring {
        if !distinct.iter().any(|d| *d == c) {
            distinct.push(c);
        }
    }
    if distinct.len() < 3 {
        return Err(format!("{what} has fewer than 3 distinct vertices"));
    }
    Ok(())
}

fn validate(geometry: &Geometry) -> std::result::Result<(), String> {
    let coords_ok = |cs: &[Coord]| cs.iter().all(Coord::is_valid);
    match geometry {
        Geometry::Point(c) if !c.is_valid() => Err("invalid point coordinate".into()),
        Geometry::Point(_) => Ok(()),
        Geometry::Polyline(cs) if cs.len() < 2 => Err("polyline needs at least 2 vertices".into()),
        Geometry::Polyline(cs) if !coords_ok(cs) => Err("invalid polyline coordinate".into()),
        Geometry::Polyline(_) => Ok(()),
        Geometry::Polygon { exterior, holes } => {
            if !coords_ok(exterior) || !holes.iter().all(|h| coords_ok(h)) {
                return Err("invalid polygon coordinate".into());
            }
            validate_ring(exterior, "polygon exterior")?;
            holes.iter().try_for_each(|h| validate_ring(h, "polygon hole"))
        }
        Geometry::Multi(parts) if parts.is_empty() => Err("empty multi-geometry".into()),
        Geometry::Multi(parts) => parts.iter().try_for_each(validate),
    }
}

/// Cells a feature touches: the containing cell of a point, every cell a
/// polyline traverses, and every cell whose center lies inside a polygon.
/// Each cell appears once.
pub fn feature_cells(geometry: &Geometry, resolution: Resolution) -> std::result::Result<Vec<CellIndex>, String> {
    validate(geometry)?;
    let mut cells = Vec::new();
    collect_cells(geometry, resolution, &mut cells)?;
    cells.sort_unstable();
    cells.dedup();
    Ok(cells)
}

fn collect_cells(geometry: &Geometry, resolution: Resolution, out: &mut Vec<CellIndex>) -> std::result::Result<(), String> {
    match geometry {
        Geometry::Point(c) => out.push(point_cell(*c, resolution)),
        Geometry::Polyline(cs) => {
            for w in cs.windows(2) {
                segment_cells(w[0], w[1], resolution, out);
            }
        }
        Geometry::Polygon { exterior, holes } => {
            let ring = |cs: &[Coord]| LineString::from(cs.iter().map(|c| c.to_geo()).collect::<Vec<_>>());
            let polygon = Polygon::new(ring(exterior), holes.iter().map(|h| ring(h)).collect());
            let mut tiler = TilerBuilder::new(resolution).containment_mode(ContainmentMode::ContainsCentroid).build();
            let centroid = polygon.centroid();
            tiler.add(polygon).map_err(|e| format!("polygon rejected: {e}"))?;
            let before = out.len();
            out.extend(tiler.into_coverage());
            // a polygon smaller than a cell may cover no cell center
            if out.len() == before {
                if let Some(c) = centroid {
                    out.push(point_cell(Coord::new(c.y(), c.x()), resolution));
                }
            }
        }
        Geometry::Multi(parts) => {
            for p in parts {
                collect_cells(p, resolution, out)?;
            }
        }
    }
    Ok(())
}

fn point_cell(c: Coord, resolution: Resolution) -> CellIndex {
    LatLng::new(c.lat, c.lon).expect("validated coordinate").to_cell(resolution)
}

fn segment_cells(a: Coord, b: Coord, resolution: Resolution, out: &mut Vec<CellIndex>) {
    let mut plotter = PlotterBuilder::new(resolution).build();
    let plotted = plotter
        .add(Line::new(a.to_geo(), b.to_geo()))
        .ok()
        .and_then(|_| plotter.plot().collect::<std::result::Result<Vec<_>, _>>().ok());
    match plotted {
        Some(cells) => out.extend(cells),
        None => {
            // grid paths fail across icosahedron faces; sample the segment instead
            let step = resolution.edge_length_m() / 4.0;
            let n = (super::haversine_m(a.lat, a.lon, b.lat, b.lon) / step).ceil().max(1.0) as usize;
            for i in 0..=n {
                let f = i as f64 / n as f64;
                out.push(point_cell(Coord::new(a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon)), resolution));
            }
        }
    }
}

/// Cell id to per-category counts. Absent cells count zero everywhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialFeatureIndex {
    pub resolution: Resolution,
    pub categories: Vec<String>,
    pub counts: HashMap<CellIndex, Vec<u32>>,
}

impl SpatialFeatureIndex {
    pub fn new(resolution: Resolution, categories: Vec<String>) -> Self {
        Self { resolution, categories, counts: HashMap::new() }
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn get(&self, cell: CellIndex) -> Option<&[u32]> {
        self.counts.get(&cell).map(Vec::as_slice)
    }

    fn add_cell(&mut self, cell: CellIndex, category: usize, amount: u32) {
        let n = self.categories.len();
        self.counts.entry(cell).or_insert_with(|| vec![0; n])[category] += amount;
    }

    /// Cell-wise addition.
    pub fn merge(&mut self, other: &SpatialFeatureIndex) {
        for (cell, counts) in &other.counts {
            for (c, &v) in counts.iter().enumerate() {
                if v > 0 {
                    self.add_cell(*cell, c, v);
                }
            }
        }
    }

    pub fn write_text<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "# spatial-feature-index v1");
        let _ = writeln!(out, "resolution={}", u8::from(self.resolution));
        let _ = writeln!(out, "categories={}", self.categories.join(","));
        let ordered: BTreeMap<u64, &Vec<u32>> = self.counts.iter().map(|(c, v)| (u64::from(*c), v)).collect();
        for (cell, counts) in ordered {
            let _ = write!(out, "{}", CellIndex::try_from(cell).expect("stored cell"));
            for v in counts {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        sink.write_all(out.as_bytes()).map_err(|e| Error::io("spatial index", e))
    }

    pub fn read_text<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("spatial index truncated before {what}")))?
                .map_err(|e| Error::io("spatial index", e))
        };
        let header = next("header")?;
        if header.trim() != "# spatial-feature-index v1" {
            return Err(Error::Parse(format!("unsupported spatial index header `{header}`")));
        }
        let res_line = next("resolution")?;
        let level: u8 = res_line
            .strip_prefix("resolution=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad resolution line `{res_line}`")))?;
        let cat_line = next("categories")?;
        let categories: Vec<String> = cat_line
            .strip_prefix("categories=")
            .ok_or_else(|| Error::Parse(format!("bad categories line `{cat_line}`")))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut index = SpatialFeatureIndex::new(resolution_from(level)?, categories);
        let n = index.n_categories();
        for line in lines {
            let line = line.map_err(|e| Error::io("spatial index", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let cell: CellIndex = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad cell in `{line}`")))?;
            let counts: Vec<u32> = fields
                .map(|s| s.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("bad count in `{line}`: {e}")))?;
            if counts.len() != n {
                return Err(Error::Parse(format!("expected {n} counts in `{line}`")));
            }
            index.counts.insert(cell, counts);
        }
        Ok(index)
    }
}

#[derive(Clone, Debug, Default)]
pub struct IndexBuild {
    pub skipped: Vec<Skipped>,
}

/// Builds the index as a reduce over feature chunks; partial maps are merged
/// by addition so the result does not depend on the execution strategy.
pub fn build_index(
    features: &[GeoFeature],
    resolution: Resolution,
    categories: &[String],
    exec: Execution,
) -> (SpatialFeatureIndex, IndexBuild) {
    let chunk = 512;
    let partials = exec.map_chunks(features, chunk, |slice| {
        let mut part = SpatialFeatureIndex::new(resolution, categories.to_vec());
        let mut skipped = Vec::new();
        for (i, f) in slice.iter().enumerate() {
            if f.category >= categories.len() {
                skipped.push((i, format!("category index {} out of range", f.category)));
                continue;
            }
            match feature_cells(&f.geometry, resolution) {
                Ok(cells) => cells.into_iter().for_each(|c| part.add_cell(c, f.category, 1)),
                Err(reason) => skipped.push((i, reason)),
            }
        }
        (part, skipped)
    });
    let mut index = SpatialFeatureIndex::new(resolution, categories.to_vec());
    let mut report = IndexBuild::default();
    for (k, (part, skipped)) in partials.into_iter().enumerate() {
        index.merge(&part);
        report
            .skipped
            .extend(skipped.into_iter().map(|(i, reason)| Skipped { position: k * chunk + i, reason }));
    }
    (index, report)
}

/// Reads a GeoJSON FeatureCollection. A feature's category comes from its
/// `category` property, or failing that from any `key=value` property pair
/// matched against the mapping rules.
pub fn read_geojson(text: &str, mapping: &CategoryMapping) -> Result<(Vec<GeoFeature>, Vec<Skipped>)> {
    let collection: geojson::FeatureCollection =
        text.parse().map_err(|e: geojson::Error| Error::Parse(format!("geojson: {e}")))?;
    let mut features = Vec::new();
    let mut skipped = Vec::new();
    for (position, feature) in collection.features.into_iter().enumerate() {
        let category = feature.properties.as_ref().and_then(|props| feature_category(props, mapping));
        let Some(category) = category else {
            skipped.push(Skipped { position, reason: "no category mapping".into() });
            continue;
        };
        match feature.geometry.as_ref().map(|g| convert(&g.value)) {
            Some(Ok(geometry)) => match validate(&geometry) {
                Ok(()) => features.push(GeoFeature { geometry, category }),
                Err(reason) => skipped.push(Skipped { position, reason }),
            },
            Some(Err(reason)) => skipped.push(Skipped { position, reason }),
            None => skipped.push(Skipped { position, reason: "missing geometry".into() }),
        }
    }
    Ok((features, skipped))
}

fn feature_category(props: &serde_json::Map<String, Value>, mapping: &CategoryMapping) -> Option<usize> {
    if let Some(tag) = props.get("category").and_then(Value::as_str) {
        return mapping.resolve(tag);
    }
    props.iter().find_map(|(k, v)| v.as_str().and_then(|v| mapping.resolve(&format!("{k}={v}"))))
}

fn position(p: &geojson::Position) -> std::result::Result<Coord, String> {
    let s = p.as_slice();
    if s.len() < 2 {
        return Err("position with fewer than 2 coordinates".into());
    }
    Ok(Coord::new(s[1], s[0]))
}

fn positions(ps: &[geojson::Position]) -> std::result::Result<Vec<Coord>, String> {
    ps.iter().map(position).collect()
}

fn polygon(rings: &[Vec<geojson::Position>]) -> std::result::Result<Geometry, String> {
    let (first, rest) = rings.split_first().ok_or("polygon without rings")?;
    Ok(Geometry::Polygon { exterior: positions(first)?, holes: rest.iter().map(|r| positions(r)).collect::<std::result::Result<_, _>>()? })
}

fn convert(value: &geojson::GeometryValue) -> std::result::Result<Geometry, String> {
    use geojson::GeometryValue as V;
    Ok(match value {
        V::Point { coordinates } => Geometry::Point(position(coordinates)?),
        V::MultiPoint { coordinates } => {
            Geometry::Multi(coordinates.iter().map(|p| position(p).map(Geometry::Point)).collect::<std::result::Result<_, _>>()?)
        }
        V::LineString { coordinates } => Geometry::Polyline(positions(coordinates)?),
        V::MultiLineString { coordinates } => Geometry::Multi(
            coordinates.iter().map(|l| positions(l).map(Geometry::Polyline)).collect::<std::result::Result<_, _>>()?,
        ),
        V::Polygon { coordinates } => polygon(coordinates)?,
        V::MultiPolygon { coordinates } => {
            Geometry::Multi(coordinates.iter().map(|p| polygon(p)).collect::<std::result::Result<_, _>>()?)
        }
        V::GeometryCollection { geometries } => {
            Geometry::Multi(geometries.iter().map(|g| convert(&g.value)).collect::<std::result::Result<_, _>>()?)
        }
    })
}

/// Serializes features with their category name under `category`.
pub fn write_geojson(features: &[GeoFeature], tags: &[String]) -> String {
    fn value(g: &Geometry) -> geojson::GeometryValue {
        let pos = |c: &Coord| [c.lon, c.lat];
        match g {
            Geometry::Point(c) => geojson::GeometryValue::new_point(pos(c)),
            Geometry::Polyline(cs) => geojson::GeometryValue::new_line_string(cs.iter().map(pos)),
            Geometry::Polygon { exterior, holes } => geojson::GeometryValue::new_polygon(
                std::iter::once(exterior).chain(holes.iter()).map(|r| r.iter().map(pos).collect::<Vec<_>>()),
            ),
            Geometry::Multi(parts) => geojson::GeometryValue::new_geometry_collection(
                parts.iter().map(|p| geojson::Geometry::new(value(p))),
            ),
        }
    }
    let features = features
        .iter()
        .zip(tags)
        .map(|(f, tag)| {
            let mut props = serde_json::Map::new();
            props.insert("category".into(), Value::String(tag.clone()));
            geojson::Feature {
                geometry: Some(geojson::Geometry::new(value(&f.geometry))),
                properties: Some(props),
                ..Default::default()
            }
        })
        .collect();
    let fc = geojson::FeatureCollection { bbox: None, features, foreign_members: None };
    serde_json::to_string(&fc).expect("geojson serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::category::DEFAULT_CATEGORIES;

    fn cats() -> Vec<String> {
        DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
    }

    fn res10() -> Resolution {
        Resolution::Ten
    }

    #[test]
    fn single_point_feature() {
        let f = GeoFeature { geometry: Geometry::Point(Coord::new(34.05, -118.25)), category: 4 };
        let (index, report) = build_index(&[f], res10(), &cats(), Execution::Sequential);
        assert!(report.skipped.is_empty());
        assert_eq!(index.counts.len(), 1);
        let v = index.counts.values().next().unwrap();
        assert_eq!(v.len(), 13);
        assert_eq!(v.iter().sum::<u32>(), 1);
        assert_eq!(v[4], 1);
    }

    #[test]
    fn two_points_same_cell_add_up() {
        let a = GeoFeature { geometry: Geometry::Point(Coord::new(34.05, -118.25)), category: 2 };
        let b = GeoFeature { geometry: Geometry::Point(Coord::new(34.05000001, -118.25)), category: 2 };
        let (index, _) = build_index(&[a, b], res10(), &cats(), Execution::Sequential);
        assert_eq!(index.counts.len(), 1);
        assert_eq!(index.counts.values().next().unwrap()[2], 2);
    }

    /// Ray-casting point-in-ring test, written independently of the tiler.
    fn inside(ring: &[Coord], p: (f64, f64)) -> bool {
        let (y, x) = p;
        let mut hit = false;
        let n = ring.len();
        for i in 0..n {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            if (a.lat > y) != (b.lat > y) {
                let xc = a.lon + (y - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
                if x < xc {
                    hit = !hit;
                }
            }
        }
        hit
    }

    #[test]
    fn polygon_cells_match_center_containment() {
        let exterior = vec![
            Coord::new(34.000, -118.300),
            Coord::new(34.004, -118.296),
            Coord::new(34.010, -118.300),
            Coord::new(34.006, -118.306),
            Coord::new(34.001, -118.305),
        ];
        let g = Geometry::Polygon { exterior: exterior.clone(), holes: vec![] };
        let cells = feature_cells(&g, res10()).unwrap();
        assert!(cells.len() > 3);

        // candidates: a generous disk around every vertex cell
        let mut candidates: Vec<CellIndex> = exterior
            .iter()
            .flat_map(|c| point_cell(*c, res10()).grid_disk::<Vec<_>>(12))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let expected: Vec<CellIndex> = candidates
            .into_iter()
            .filter(|c| {
                let ll = LatLng::from(*c);
                inside(&exterior, (ll.lat(), ll.lng()))
            })
            .collect();
        assert_eq!(cells, expected);
    }

    #[test]
    fn tiny_polygon_falls_back_to_its_centroid_cell() {
        let exterior = vec![
            Coord::new(34.0000, -118.3000),
            Coord::new(34.0001, -118.3000),
            Coord::new(34.0001, -118.2999),
            Coord::new(34.0000, -118.2999),
            Coord::new(34.0000, -118.3000),
        ];
        let cells = feature_cells(&Geometry::Polygon { exterior, holes: vec![] }, res10()).unwrap();
        assert_eq!(cells, vec![point_cell(Coord::new(34.00005, -118.29995), res10())]);
    }

    #[test]
    fn polyline_covers_its_vertices_and_is_contiguous() {
        let line = vec![Coord::new(34.0, -118.3), Coord::new(34.01, -118.29), Coord::new(34.012, -118.31)];
        let cells = feature_cells(&Geometry::Polyline(line.clone()), res10()).unwrap();
        for c in &line {
            assert!(cells.contains(&point_cell(*c, res10())));
        }
        // every traversed cell touches another one on the path
        for c in &cells {
            assert!(cells.iter().any(|d| d != c && c.is_neighbor_with(*d).unwrap_or(false)));
        }
    }

    #[test]
    fn invalid_geometry_is_skipped() {
        let features = vec![
            GeoFeature { geometry: Geometry::Polyline(vec![Coord::new(1.0, 1.0)]), category: 0 },
            GeoFeature { geometry: Geometry::Point(Coord::new(91.0, 0.0)), category: 0 },
            GeoFeature { geometry: Geometry::Point(Coord::new(1.0, 1.0)), category: 99 },
            GeoFeature { geometry: Geometry::Point(Coord::new(1.0, 1.0)), category: 1 },
        ];
        let (index, report) = build_index(&features, res10(), &cats(), Execution::Sequential);
        assert_eq!(report.skipped.iter().map(|s| s.position).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(index.counts.len(), 1);
    }

    #[test]
    fn text_dump_round_trips() {
        let features: Vec<GeoFeature> = (0..20)
            .map(|i| GeoFeature { geometry: Geometry::Point(Coord::new(34.0 + i as f64 * 0.003, -118.2)), category: i % 13 })
            .collect();
        let (index, _) = build_index(&features, res10(), &cats(), Execution::Sequential);
        let mut buf = Vec::new();
        index.write_text(&mut buf).unwrap();
        let back = SpatialFeatureIndex::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, index);
        assert!(SpatialFeatureIndex::read_text("# other v9\n".as_bytes()).is_err());
    }

    #[test]
    fn geojson_round_trip_and_mapping() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","geometry":{"type":"Point","coordinates":[-118.2,34.0]},"properties":{"category":"amenity=cafe"}},
            {"type":"Feature","geometry":{"type":"LineString","coordinates":[[-118.2,34.0],[-118.21,34.01]]},"properties":{"highway":"primary"}},
            {"type":"Feature","geometry":{"type":"Point","coordinates":[-118.2,34.0]},"properties":{"category":"amenity=bench"}},
            {"type":"Feature","geometry":null,"properties":{"category":"water"}}
        ]}"#;
        let mapping = CategoryMapping::default();
        let (features, skipped) = read_geojson(text, &mapping).unwrap();
        assert_eq!(features.len(), 2);
        assert_eq!(features[0].category, 9);
        assert_eq!(features[1].category, 4);
        assert_eq!(skipped.iter().map(|s| s.position).collect::<Vec<_>>(), vec![2, 3]);

        let tags: Vec<String> = features.iter().map(|f| mapping.categories[f.category].clone()).collect();
        let (again, _) = read_geojson(&write_geojson(&features, &tags), &mapping).unwrap();
        assert_eq!(again, features);
    }
}
