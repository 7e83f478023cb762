//! Deterministic synthetic mobility with injected individual-level
//! behavioral anomalies.
//!
//! Each individual lives at a home location and follows one or two
//! archetypes. An archetype is a daily tour (home, a fixed sequence of
//! activity visits, home) with a typical start time and allowed weekdays.
//! Activity visits go to zones that carry category-correlated geo features,
//! so the spatial buffer features tell the activities apart. Normal
//! individuals keep their archetypes and weekly trip count across both
//! periods; anomalous ones change in the test period.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_staypoints, StayPoint, Timestamp};
use crate::error::{Error, Result};
use crate::eval::write_labels;
use crate::exec::Execution;
use crate::spatial::category::DEFAULT_CATEGORIES;
use crate::spatial::index::{write_geojson, Coord, GeoFeature, Geometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Most test trips follow an archetype the individual never used.
    DistributionShift,
    /// A minority of test trips follow a new archetype at new places.
    NewBehavior,
    /// Trips per week halve or double.
    FrequencyChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_individuals: usize,
    pub anomaly_rate: f64,
    pub seed: u64,
    pub anomaly_types: Vec<AnomalyKind>,
    pub train_weeks: u32,
    pub test_weeks: u32,
    /// Local calendar date of the first day, `YYYY-MM-DD`.
    pub start_date: String,
    /// `[lat_min, lon_min, lat_max, lon_max]`.
    pub bbox: [f64; 4],
    pub zones_per_kind: usize,
    pub features_per_zone: usize,
    pub background_features: usize,
    /// Share of test trips moved to a new archetype by a distribution shift.
    pub shift_fraction: f64,
    /// Share of test trips given to the adopted archetype by new behavior.
    pub new_behavior_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_individuals: 500,
            anomaly_rate: 0.05,
            seed: 7,
            anomaly_types: vec![AnomalyKind::DistributionShift, AnomalyKind::NewBehavior, AnomalyKind::FrequencyChange],
            train_weeks: 3,
            test_weeks: 3,
            start_date: "2024-01-01".into(),
            bbox: [33.90, -118.45, 34.20, -118.15],
            zones_per_kind: 12,
            features_per_zone: 25,
            background_features: 2000,
            shift_fraction: 0.8,
            new_behavior_fraction: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 {
            return Err(Error::config("synth.n_individuals", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::config("synth.anomaly_rate", "must lie in [0, 1]"));
        }
        self.anomalous_count()?;
        let [lat0, lon0, lat1, lon1] = self.bbox;
        if !(lat0 < lat1 && lon0 < lon1 && lat0 >= -80.0 && lat1 <= 80.0 && lon0 >= -180.0 && lon1 <= 180.0) {
            return Err(Error::config("synth.bbox", "expected [lat_min, lon_min, lat_max, lon_max] with min < max"));
        }
        if self.train_weeks == 0 || self.test_weeks == 0 {
            return Err(Error::config("synth.train_weeks", "both periods need at least one week"));
        }
        if self.zones_per_kind == 0 || self.features_per_zone == 0 {
            return Err(Error::config("synth.zones_per_kind", "zones and zone features must be positive"));
        }
        for (field, v) in [("synth.shift_fraction", self.shift_fraction), ("synth.new_behavior_fraction", self.new_behavior_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        self.local_start()?;
        Ok(())
    }

    /// Number of anomalous individuals; the rate must land on an integer.
    pub fn anomalous_count(&self) -> Result<usize> {
        let exact = self.anomaly_rate * self.n_individuals as f64;
        let count = exact.round();
        if (exact - count).abs() > 1e-6 {
            return Err(Error::config(
                "synth.anomaly_rate",
                format!("{} x {} = {exact} is not a whole number of individuals", self.anomaly_rate, self.n_individuals),
            ));
        }
        Ok(if self.anomaly_types.is_empty() { 0 } else { count as usize })
    }

    fn local_start(&self) -> Result<Timestamp> {
        let date = chrono::NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| Error::config("synth.start_date", e.to_string()))?;
        Ok(date.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
    }

    /// First instant of the test period in UTC epoch seconds.
    pub fn boundary(&self, tz_offset_hours: f64) -> Result<Timestamp> {
        let offset = (tz_offset_hours * 3600.0).round() as i64;
        Ok(self.local_start()? - offset + self.train_weeks as i64 * 7 * 86_400)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Zone {
    Office,
    Food,
    Retail,
    Park,
    Industrial,
    Education,
    Health,
}

const ZONES: [Zone; 7] = [Zone::Office, Zone::Food, Zone::Retail, Zone::Park, Zone::Industrial, Zone::Education, Zone::Health];

impl Zone {
    fn index(self) -> usize {
        ZONES.iter().position(|z| *z == self).expect("listed")
    }

    /// Dominant and secondary feature categories planted in the zone.
    fn categories(self) -> (&'static str, &'static str) {
        match self {
            Zone::Office => ("landuse_commercial", "building"),
            Zone::Food => ("poi_food", "poi_shop"),
            Zone::Retail => ("poi_shop", "landuse_commercial"),
            Zone::Park => ("park_green", "natural_area"),
            Zone::Industrial => ("landuse_industrial", "rail"),
            Zone::Education => ("poi_education_health", "building"),
            Zone::Health => ("poi_education_health", "poi_food"),
        }
    }
}

struct Archetype {
    name: &'static str,
    /// Mean local start hour of the first activity.
    start_hour: f64,
    /// Activity zones with mean dwell hours.
    visits: &'static [(Zone, f64)],
    /// Allowed days, Monday = 0.
    days: &'static [u32],
}

const WEEKDAYS: &[u32] = &[0, 1, 2, 3, 4];
const ALL_DAYS: &[u32] = &[0, 1, 2, 3, 4, 5, 6];

const ARCHETYPES: [Archetype; 6] = [
    Archetype { name: "commuter", start_hour: 8.5, visits: &[(Zone::Office, 8.0), (Zone::Food, 1.0)], days: WEEKDAYS },
    Archetype {
        name: "shopper",
        start_hour: 10.5,
        visits: &[(Zone::Retail, 1.5), (Zone::Food, 1.0), (Zone::Retail, 1.0)],
        days: ALL_DAYS,
    },
    Archetype {
        name: "recreation",
        start_hour: 8.0,
        visits: &[(Zone::Park, 3.0), (Zone::Food, 1.0), (Zone::Park, 1.5)],
        days: &[4, 5, 6],
    },
    Archetype { name: "night_shift", start_hour: 21.5, visits: &[(Zone::Industrial, 8.0), (Zone::Food, 0.75)], days: ALL_DAYS },
    Archetype { name: "student", start_hour: 7.5, visits: &[(Zone::Education, 6.0), (Zone::Park, 1.5)], days: WEEKDAYS },
    Archetype {
        name: "care",
        start_hour: 9.0,
        visits: &[(Zone::Health, 1.5), (Zone::Retail, 1.0), (Zone::Food, 1.0)],
        days: ALL_DAYS,
    },
];

pub fn archetype_names() -> Vec<&'static str> {
    ARCHETYPES.iter().map(|a| a.name).collect()
}

/// Ground truth for one individual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualTruth {
    pub individual_id: String,
    pub archetypes: Vec<usize>,
    pub anomaly: Option<AnomalyKind>,
    pub trips_per_week_train: u32,
    pub trips_per_week_test: u32,
    /// Archetype of every trip, in time order.
    pub train_sequence: Vec<usize>,
    pub test_sequence: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub staypoints: Vec<StayPoint>,
    pub features: Vec<GeoFeature>,
    pub categories: Vec<String>,
    pub labels: BTreeMap<String, bool>,
    pub truth: Vec<IndividualTruth>,
    pub boundary: Timestamp,
}

fn offset(c: Coord, north_m: f64, east_m: f64) -> Coord {
    let dlat = north_m / 111_320.0;
    let dlon = east_m / (111_320.0 * c.lat.to_radians().cos());
    Coord::new(c.lat + dlat, c.lon + dlon)
}

fn jitter<R: Rng>(rng: &mut R, c: Coord, radius_m: f64) -> Coord {
    let r = radius_m * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    offset(c, r * a.sin(), r * a.cos())
}

fn uniform_in<R: Rng>(rng: &mut R, bbox: &[f64; 4]) -> Coord {
    Coord::new(rng.random_range(bbox[0]..bbox[2]), rng.random_range(bbox[1]..bbox[3]))
}

fn category(name: &str) -> usize {
    DEFAULT_CATEGORIES.iter().position(|c| *c == name).expect("known category")
}

struct World {
    /// Zone centers per zone kind.
    zones: Vec<Vec<Coord>>,
    features: Vec<GeoFeature>,
}

fn build_world(cfg: &SynthConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut features = Vec::new();
    let mut zones = Vec::new();
    for kind in ZONES {
        let (main, side) = kind.categories();
        let mut centers = Vec::with_capacity(cfg.zones_per_kind);
        for _ in 0..cfg.zones_per_kind {
            let c = uniform_in(&mut rng, &cfg.bbox);
            for _ in 0..cfg.features_per_zone {
                let cat = if rng.random_bool(0.8) { main } else { side };
                features.push(GeoFeature { geometry: Geometry::Point(jitter(&mut rng, c, 250.0)), category: category(cat) });
            }
            if kind == Zone::Park {
                let ring: Vec<Coord> = [(-150.0, -150.0), (-150.0, 150.0), (150.0, 150.0), (150.0, -150.0), (-150.0, -150.0)]
                    .iter()
                    .map(|(n, e)| offset(c, *n, *e))
                    .collect();
                features.push(GeoFeature { geometry: Geometry::Polygon { exterior: ring, holes: vec![] }, category: category("park_green") });
            }
            centers.push(c);
        }
        zones.push(centers);
    }
    // a coarse road grid plus scattered background features
    let [lat0, lon0, lat1, lon1] = cfg.bbox;
    for i in 1..6 {
        let lat = lat0 + (lat1 - lat0) * i as f64 / 6.0;
        let lon = lon0 + (lon1 - lon0) * i as f64 / 6.0;
        features.push(GeoFeature {
            geometry: Geometry::Polyline(vec![Coord::new(lat, lon0), Coord::new(lat, lon1)]),
            category: category("road_major"),
        });
        features.push(GeoFeature {
            geometry: Geometry::Polyline(vec![Coord::new(lat0, lon), Coord::new(lat1, lon)]),
            category: category("road_major"),
        });
    }
    for _ in 0..cfg.background_features {
        let cat = rng.random_range(0..DEFAULT_CATEGORIES.len());
        features.push(GeoFeature { geometry: Geometry::Point(uniform_in(&mut rng, &cfg.bbox)), category: cat });
    }
    World { zones, features }
}

/// Places one individual uses, fixed for the whole simulation.
struct Places {
    home: Coord,
    /// Chosen zone center per (archetype, visit).
    visits: Vec<Vec<Coord>>,
}

fn pick_places<R: Rng>(rng: &mut R, world: &World, cfg: &SynthConfig) -> Places {
    let home = uniform_in(rng, &cfg.bbox);
    let visits = ARCHETYPES
        .iter()
        .map(|a| a.visits.iter().map(|(z, _)| *world.zones[z.index()].choose(rng).expect("zones exist")).collect())
        .collect();
    Places { home, visits }
}

struct Tour {
    archetype: usize,
    points: Vec<(Coord, Timestamp, Timestamp)>,
}

fn tour<R: Rng>(rng: &mut R, archetype: usize, places: &Places, day_start: Timestamp, not_before: Timestamp) -> Tour {
    let a = &ARCHETYPES[archetype];
    let start_noise = Normal::new(0.0, 0.4).expect("valid sd");
    let hours = |h: f64| (h * 3600.0).round() as i64;
    let first = day_start + hours(a.start_hour + start_noise.sample(rng));
    let home_dwell = rng.random_range(2400..3600);
    let mut t = (first - home_dwell).max(not_before);
    let mut points = Vec::with_capacity(a.visits.len() + 2);
    let stay = |at: Coord, t: &mut Timestamp, dwell: i64, rng: &mut R| {
        let p = (jitter(rng, at, 40.0), *t, *t + dwell);
        *t += dwell + rng.random_range(600..1500);
        p
    };
    points.push(stay(places.home, &mut t, home_dwell, rng));
    for (i, (_, dwell_h)) in a.visits.iter().enumerate() {
        let dwell = hours(dwell_h * rng.random_range(0.8..1.2));
        points.push(stay(places.visits[archetype][i], &mut t, dwell, rng));
    }
    let last = rng.random_range(3600..7200);
    points.push(stay(places.home, &mut t, last, rng));
    Tour { archetype, points }
}

/// Days (offsets from `first_day`) of one period, `per_week` per week.
fn schedule<R: Rng>(rng: &mut R, weeks: u32, per_week: u32, allowed: &[u32]) -> Vec<u32> {
    let mut days = Vec::new();
    for w in 0..weeks {
        let mut pool = allowed.to_vec();
        pool.shuffle(rng);
        let mut chosen: Vec<u32> = pool.into_iter().take(per_week as usize).map(|d| w * 7 + d).collect();
        chosen.sort_unstable();
        days.extend(chosen);
    }
    days
}

fn allowed_days(archetypes: &[usize]) -> Vec<u32> {
    let mut days: Vec<u32> = archetypes.iter().flat_map(|&a| ARCHETYPES[a].days.iter().copied()).collect();
    days.sort_unstable();
    days.dedup();
    days
}

/// Picks the archetype of a trip on a given weekday, honoring weights
/// among archetypes allowed that day.
fn pick_archetype<R: Rng>(rng: &mut R, archetypes: &[usize], weights: &[f64], weekday: u32) -> usize {
    let options: Vec<(usize, f64)> = archetypes
        .iter()
        .zip(weights)
        .filter(|(a, _)| ARCHETYPES[**a].days.contains(&weekday))
        .map(|(a, w)| (*a, *w))
        .collect();
    let options = if options.is_empty() { vec![(archetypes[0], 1.0)] } else { options };
    options.choose_weighted(rng, |o| o.1).expect("positive weights").0
}

struct Generated {
    staypoints: Vec<StayPoint>,
    truth: IndividualTruth,
}

fn individual(cfg: &SynthConfig, world: &World, index: usize, anomaly: Option<AnomalyKind>, t0: Timestamp) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let id = format!("ind{index:05}");
    let places = pick_places(&mut rng, world, cfg);

    let mut pool: Vec<usize> = (0..ARCHETYPES.len()).collect();
    pool.shuffle(&mut rng);
    let n_arch = if rng.random_bool(0.5) { 1 } else { 2 };
    let archetypes: Vec<usize> = pool[..n_arch].to_vec();
    let weights: Vec<f64> = if n_arch == 1 { vec![1.0] } else { vec![0.7, 0.3] };
    let novel = pool[n_arch];
    let allowed = allowed_days(&archetypes);
    let tpw_train = rng.random_range(3..=5u32).min(allowed.len() as u32);
    let tpw_test = match anomaly {
        Some(AnomalyKind::FrequencyChange) => {
            if 2 * tpw_train <= allowed.len() as u32 && rng.random_bool(0.5) {
                2 * tpw_train
            } else {
                (tpw_train / 2).max(1)
            }
        }
        _ => tpw_train,
    };

    let train_days = schedule(&mut rng, cfg.train_weeks, tpw_train, &allowed);
    let test_days: Vec<u32> = schedule(&mut rng, cfg.test_weeks, tpw_test, &allowed)
        .into_iter()
        .map(|d| d + cfg.train_weeks * 7)
        .collect();
    let mut train_sequence: Vec<usize> =
        train_days.iter().map(|d| pick_archetype(&mut rng, &archetypes, &weights, d % 7)).collect();
    let mut test_sequence: Vec<usize> =
        test_days.iter().map(|d| pick_archetype(&mut rng, &archetypes, &weights, d % 7)).collect();
    let moved = match anomaly {
        Some(AnomalyKind::DistributionShift) => (cfg.shift_fraction * test_sequence.len() as f64).round() as usize,
        Some(AnomalyKind::NewBehavior) => ((cfg.new_behavior_fraction * test_sequence.len() as f64).round() as usize).max(1),
        _ => 0,
    };
    let mut slots: Vec<usize> = (0..test_sequence.len()).collect();
    slots.shuffle(&mut rng);
    for &s in slots.iter().take(moved) {
        test_sequence[s] = novel;
    }
    // keep the generated sequences consistent with the tours actually emitted
    let mut staypoints = Vec::new();
    let mut not_before = i64::MIN;
    for (days, seq) in [(&train_days, &mut train_sequence), (&test_days, &mut test_sequence)] {
        for (d, a) in days.iter().zip(seq.iter()) {
            let trip = tour(&mut rng, *a, &places, t0 + *d as i64 * 86_400, not_before);
            debug_assert_eq!(trip.archetype, *a);
            not_before = trip.points.last().expect("non-empty tour").2 + 7200;
            staypoints.extend(trip.points.into_iter().map(|(c, s, e)| StayPoint {
                individual_id: id.clone(),
                lat: c.lat,
                lon: c.lon,
                t_start: s,
                t_end: e,
            }));
        }
    }
    Generated {
        staypoints,
        truth: IndividualTruth {
            individual_id: id,
            archetypes,
            anomaly,
            trips_per_week_train: tpw_train,
            trips_per_week_test: tpw_test,
            train_sequence,
            test_sequence,
        },
    }
}

/// Generates staypoints, geo features and labels. Output depends only on
/// the configuration, never on the execution strategy.
pub fn generate(cfg: &SynthConfig, tz_offset_hours: f64, exec: Execution) -> Result<SynthOutput> {
    cfg.validate()?;
    let world = build_world(cfg);
    let n_anom = cfg.anomalous_count()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut ids: Vec<usize> = (0..cfg.n_individuals).collect();
    ids.shuffle(&mut rng);
    let mut kinds = cfg.anomaly_types.clone();
    kinds.sort();
    kinds.dedup();
    let mut anomaly = vec![None; cfg.n_individuals];
    for (j, &i) in ids.iter().take(n_anom).enumerate() {
        anomaly[i] = Some(kinds[j % kinds.len()]);
    }
    let boundary = cfg.boundary(tz_offset_hours)?;
    let t0 = boundary - cfg.train_weeks as i64 * 7 * 86_400;
    let indices: Vec<usize> = (0..cfg.n_individuals).collect();
    let people = exec.map(&indices, |&i| individual(cfg, &world, i, anomaly[i], t0));

    let mut staypoints = Vec::new();
    let mut truth = Vec::new();
    let mut labels = BTreeMap::new();
    for g in people {
        labels.insert(g.truth.individual_id.clone(), g.truth.anomaly.is_some());
        staypoints.extend(g.staypoints);
        truth.push(g.truth);
    }
    Ok(SynthOutput {
        staypoints,
        features: world.features,
        categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        labels,
        truth,
        boundary,
    })
}

pub const STAYPOINTS_FILE: &str = "staypoints.csv";
pub const GEO_FILE: &str = "geo_features.geojson";
pub const LABELS_FILE: &str = "labels.csv";
pub const TRUTH_FILE: &str = "synth_truth.json";

impl SynthOutput {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            std::fs::File::create(&path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
        };
        write_staypoints(create(STAYPOINTS_FILE)?, &self.staypoints)?;
        let tags: Vec<String> = self.features.iter().map(|f| self.categories[f.category].clone()).collect();
        let geo = write_geojson(&self.features, &tags);
        std::fs::write(dir.join(GEO_FILE), geo).map_err(|e| Error::io(dir.join(GEO_FILE), e))?;
        write_labels(create(LABELS_FILE)?, &self.labels)?;
        #[derive(Serialize)]
        struct Truth<'a> {
            boundary: Timestamp,
            archetypes: Vec<&'static str>,
            individuals: &'a [IndividualTruth],
        }
        let truth = serde_json::to_string_pretty(&Truth { boundary: self.boundary, archetypes: archetype_names(), individuals: &self.truth })
            .map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(dir.join(TRUTH_FILE), truth).map_err(|e| Error::io(dir.join(TRUTH_FILE), e))
    }
}

/// Scores individuals from the true archetype sequences: the share of test
/// trips from archetypes outside the individual's own set, plus the relative
/// change in trip count. Normal individuals score exactly zero.
pub fn oracle_scores(truth: &[IndividualTruth]) -> Vec<(String, f64)> {
    truth
        .iter()
        .map(|t| {
            let foreign = t.test_sequence.iter().filter(|a| !t.archetypes.contains(a)).count();
            let share = if t.test_sequence.is_empty() { 0.0 } else { foreign as f64 / t.test_sequence.len() as f64 };
            let (a, b) = (t.train_sequence.len(), t.test_sequence.len());
            let freq = a.abs_diff(b) as f64 / a.max(b).max(1) as f64;
            (t.individual_id.clone(), share + freq)
        })
        .collect()
}
