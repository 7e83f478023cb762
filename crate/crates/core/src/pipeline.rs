//! Stage orchestration over a run directory.
//!
//! Each stage reads the artifacts of earlier stages from the run directory
//! and writes its own, so any stage can be re-run on its own:
//!
//! | stage    | reads                                   | writes                                        |
//! |----------|-----------------------------------------|-----------------------------------------------|
//! | synth    | config                                  | staypoints, geo features, labels, truth       |
//! | ingest   | staypoints                              | `train_trips.csv`, `test_trips.csv`, `rejections.csv`, `ingest_report.json` |
//! | index    | geo features                            | `spatial_index.txt`, `index_skipped.csv`      |
//! | features | trips, spatial index                    | `features.bin`                                |
//! | train    | features                                | `model.ckpt`, `centers.json`, `train_history.csv` |
//! | profile  | features, model, centers                | `profiles.jsonl`                              |
//! | score    | profiles                                | `scores.csv`                                  |
//! | evaluate | scores, labels                          | `metrics.json`                                |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::data::{ingest_staypoints, read_trips, segment_trips, split_periods, write_rejections, write_trips, Trip};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_labels, Metrics};
use crate::exec::Execution;
use crate::features::FeatureSet;
use crate::model::checkpoint::{read_checkpoint, write_checkpoint};
use crate::model::train::train;
use crate::model::{cluster_centers, ClusterCenters};
use crate::profile::{assign_clusters, build_profile, read_profiles, write_profiles, BehaviorProfile, Period};
use crate::scoring::{read_score_totals, score_all, write_scores};
use crate::spatial::category::CategoryMapping;
use crate::spatial::index::{build_index, read_geojson, resolution_from, SpatialFeatureIndex};
use crate::spatial::BufferQuery;
use crate::synth::generate;

pub const TRAIN_TRIPS: &str = "train_trips.csv";
pub const TEST_TRIPS: &str = "test_trips.csv";
pub const REJECTIONS: &str = "rejections.csv";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const SPATIAL_INDEX: &str = "spatial_index.txt";
pub const INDEX_SKIPPED: &str = "index_skipped.csv";
pub const FEATURES: &str = "features.bin";
pub const CHECKPOINT: &str = "model.ckpt";
pub const CENTERS: &str = "centers.json";
pub const HISTORY: &str = "train_history.csv";
pub const PROFILES: &str = "profiles.jsonl";
pub const SCORES: &str = "scores.csv";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

const STAGE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Index,
    Features,
    Train,
    Profile,
    Score,
    Evaluate,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] =
        [Stage::Ingest, Stage::Index, Stage::Features, Stage::Train, Stage::Profile, Stage::Score, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Profile => "profile",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
        }
    }

    fn enabled(self, config: &PipelineConfig) -> bool {
        let s = &config.stages;
        match self {
            Stage::Synth => true,
            Stage::Ingest => s.ingest,
            Stage::Index => s.index,
            Stage::Features => s.features,
            Stage::Train => s.train,
            Stage::Profile => s.profile,
            Stage::Score => s.score,
            Stage::Evaluate => s.evaluate,
        }
    }
}

pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub exec: Execution,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    version: u32,
    config_hash: String,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IngestReport {
    staypoints: usize,
    rejected: usize,
    overlaps_dropped: usize,
    individuals: usize,
    train_trips: usize,
    test_trips: usize,
}

impl Run {
    pub fn new(config: PipelineConfig, dir: impl Into<PathBuf>) -> Self {
        let exec = config.execution();
        Self { config, dir: dir.into(), exec }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, p: &Path) -> Result<PathBuf> {
        let path = if p.is_absolute() { p.to_path_buf() } else { self.dir.join(p) };
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path))
        }
    }

    fn artifact(&self, name: &str) -> Result<PathBuf> {
        self.input(Path::new(name))
    }

    fn open(&self, name: &str) -> Result<BufReader<File>> {
        let path = self.artifact(name)?;
        File::open(&path).map(BufReader::new).map_err(|e| Error::io(path, e))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        std::fs::write(self.path(name), text).map_err(|e| Error::io(self.path(name), e))
    }

    fn record(&self, stage: Stage, outputs: &[&str]) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut manifest: Manifest = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => Manifest::default(),
        };
        let hash = self.config.hash();
        manifest.config_hash = hash.clone();
        manifest.stages.insert(
            stage.name().into(),
            StageRecord { version: STAGE_VERSION, config_hash: hash, outputs: outputs.iter().map(|s| s.to_string()).collect() },
        );
        self.write_json(MANIFEST, &manifest)?;
        std::fs::write(self.path(RESOLVED_CONFIG), self.config.to_toml()).map_err(|e| Error::io(self.path(RESOLVED_CONFIG), e))
    }

    /// Runs one stage and returns a one-line summary.
    pub fn stage(&self, stage: Stage) -> Result<String> {
        self.config.validate()?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let summary = match stage {
            Stage::Synth => self.synth()?,
            Stage::Ingest => self.ingest()?,
            Stage::Index => self.index()?,
            Stage::Features => self.features()?,
            Stage::Train => self.train()?,
            Stage::Profile => self.profile()?,
            Stage::Score => self.score()?,
            Stage::Evaluate => self.evaluate()?.0,
        };
        Ok(format!("{}: {summary}", stage.name()))
    }

    /// Runs every enabled pipeline stage in order.
    pub fn all(&self) -> Result<Vec<String>> {
        Stage::PIPELINE.iter().filter(|s| s.enabled(&self.config)).map(|s| self.stage(*s)).collect()
    }

    fn synth(&self) -> Result<String> {
        let out = generate(&self.config.synth, self.config.data.tz_offset_hours, self.exec)?;
        out.write_to(&self.dir)?;
        let positives = out.labels.values().filter(|l| **l).count();
        self.record(Stage::Synth, &[crate::synth::STAYPOINTS_FILE, crate::synth::GEO_FILE, crate::synth::LABELS_FILE, crate::synth::TRUTH_FILE])?;
        Ok(format!(
            "{} individuals ({positives} anomalous), {} staypoints, {} geo features",
            out.labels.len(),
            out.staypoints.len(),
            out.features.len()
        ))
    }

    fn ingest(&self) -> Result<String> {
        let path = self.input(&self.config.data.staypoints)?;
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let ingested = ingest_staypoints(BufReader::new(file), self.config.data.delimiter as u8)?;
        let people: Vec<(&String, &Vec<_>)> = ingested.by_individual.iter().collect();
        let segmented = self
            .exec
            .map(&people, |(_, points)| segment_trips(points, self.config.segment))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let overlaps = segmented.iter().map(|s| s.overlaps.len()).sum();
        let trips: Vec<Trip> = segmented.into_iter().flat_map(|s| s.trips).collect();
        let split = split_periods(trips, self.config.boundary()?);
        write_trips(self.create(TRAIN_TRIPS)?, &split.train_trips)?;
        write_trips(self.create(TEST_TRIPS)?, &split.test_trips)?;
        write_rejections(self.create(REJECTIONS)?, &ingested.rejections)?;
        let report = IngestReport {
            staypoints: ingested.staypoint_count(),
            rejected: ingested.rejections.len(),
            overlaps_dropped: overlaps,
            individuals: ingested.by_individual.len(),
            train_trips: split.train_trips.len(),
            test_trips: split.test_trips.len(),
        };
        self.write_json(INGEST_REPORT, &report)?;
        self.record(Stage::Ingest, &[TRAIN_TRIPS, TEST_TRIPS, REJECTIONS, INGEST_REPORT])?;
        Ok(format!(
            "{} staypoints ({} rejected, {} overlapping dropped), {} train trips, {} test trips",
            report.staypoints, report.rejected, report.overlaps_dropped, report.train_trips, report.test_trips
        ))
    }

    fn category_mapping(&self) -> Result<CategoryMapping> {
        match &self.config.data.category_mapping {
            None => Ok(CategoryMapping::default()),
            Some(p) => {
                let path = self.input(p)?;
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                CategoryMapping::from_toml(&text)
            }
        }
    }

    fn index(&self) -> Result<String> {
        let mapping = self.category_mapping()?;
        let path = self.input(&self.config.data.geo_features)?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (features, mut skipped) = read_geojson(&text, &mapping)?;
        let resolution = resolution_from(self.config.spatial.resolution)?;
        let (index, build) = build_index(&features, resolution, &mapping.categories, self.exec);
        skipped.extend(build.skipped);
        index.write_text(self.create(SPATIAL_INDEX)?)?;
        let mut w = csv::Writer::from_writer(self.create(INDEX_SKIPPED)?);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["position", "reason"]).map_err(err)?;
        for s in &skipped {
            w.write_record([s.position.to_string(), s.reason.clone()]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(self.path(INDEX_SKIPPED), e))?;
        self.record(Stage::Index, &[SPATIAL_INDEX, INDEX_SKIPPED])?;
        Ok(format!("{} features indexed into {} cells, {} skipped", features.len(), index.counts.len(), skipped.len()))
    }

    fn features(&self) -> Result<String> {
        let train = read_trips(self.open(TRAIN_TRIPS)?)?;
        let test = read_trips(self.open(TEST_TRIPS)?)?;
        let index = SpatialFeatureIndex::read_text(self.open(SPATIAL_INDEX)?)?;
        let query = BufferQuery::new(&index);
        let set = FeatureSet::compute(&train, &test, &query, &self.config.spatial.radii, self.config.data.tz_offset_hours, self.exec)?;
        set.write(self.create(FEATURES)?)?;
        self.record(Stage::Features, &[FEATURES])?;
        Ok(format!("{} trips, {} temporal + {} spatial features per staypoint", set.trips.len(), set.temporal_dim, set.spatial_dim))
    }

    fn load_features(&self) -> Result<FeatureSet> {
        FeatureSet::read(self.open(FEATURES)?)
    }

    fn train(&self) -> Result<String> {
        let set = self.load_features()?;
        let trips: Vec<_> = set.period(Period::Train).into_iter().cloned().collect();
        let outcome = train(&trips, &self.config.model, set.temporal_dim, set.spatial_dim, self.exec)?;
        let mut w = csv::Writer::from_writer(self.create(HISTORY)?);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["epoch", "phase", "kl_weight", "total", "recon", "mse_temporal", "mse_spatial", "kl", "entropy", "center"])
            .map_err(err)?;
        for r in &outcome.history {
            let l = &r.loss;
            let row = [r.kl_weight, l.total, l.recon, l.mse_temporal, l.mse_spatial, l.kl, l.entropy, l.center];
            let phase = if r.clustering { "joint" } else { "pretrain" };
            let mut rec = vec![r.epoch.to_string(), phase.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.17}")));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(self.path(HISTORY), e))?;
        if let Some(e) = outcome.divergence_error() {
            return Err(e);
        }
        let model = outcome.model;
        let states = model.encode_all(&trips, self.exec)?;
        let centers = cluster_centers(&model, &states);
        write_checkpoint(&model, self.create(CHECKPOINT)?)?;
        self.write_json(CENTERS, &centers)?;
        self.record(Stage::Train, &[CHECKPOINT, CENTERS, HISTORY])?;
        let last = outcome.history.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
        Ok(format!("{} trips, {} epochs, final loss {last:.4}, cluster support {:?}", trips.len(), outcome.history.len(), centers.support))
    }

    fn load_centers(&self) -> Result<ClusterCenters> {
        let path = self.artifact(CENTERS)?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    fn profile(&self) -> Result<String> {
        let set = self.load_features()?;
        let model = read_checkpoint(self.open(CHECKPOINT)?)?;
        let centers = self.load_centers()?;
        let k = model.k();
        let mut tables: Vec<BTreeMap<String, BehaviorProfile>> = Vec::new();
        for period in [Period::Train, Period::Test] {
            let groups = set.by_individual(period);
            let ids = assign_clusters(&groups, &model, &centers.centers, self.exec)?;
            let profiles = ids
                .iter()
                .map(|(id, seq)| build_profile(id, seq, k).map(|p| (id.clone(), p)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            tables.push(profiles);
        }
        write_profiles(self.create(PROFILES)?, &tables[0], &tables[1])?;
        self.record(Stage::Profile, &[PROFILES])?;
        Ok(format!("{} training and {} test profiles", tables[0].len(), tables[1].len()))
    }

    fn score(&self) -> Result<String> {
        let (train, test) = read_profiles(self.open(PROFILES)?)?;
        let table = score_all(&train, &test, &self.config.scoring, self.exec)?;
        let mut w = self.create(SCORES)?;
        write_scores(&mut w, &table)?;
        w.flush().map_err(|e| Error::io(self.path(SCORES), e))?;
        self.record(Stage::Score, &[SCORES])?;
        let top = table.ranked.first().map(|r| format!(", top {} at {:.4}", r.individual_id, r.total)).unwrap_or_default();
        Ok(format!("{} individuals ranked, {} excluded{top}", table.ranked.len(), table.excluded.len()))
    }

    /// Computes and persists metrics; also returns them.
    pub fn evaluate(&self) -> Result<(String, Metrics)> {
        let scores = read_score_totals(self.open(SCORES)?)?;
        let path = self.input(&self.config.data.labels)?;
        let labels = read_labels(File::open(&path).map_err(|e| Error::io(&path, e))?)?;
        let metrics = evaluate(&scores, &labels)?;
        self.write_json(METRICS, &metrics)?;
        self.record(Stage::Evaluate, &[METRICS])?;
        Ok((
            format!("auroc {:.4}, ap {:.4} over {} individuals ({} positive)", metrics.auroc, metrics.ap, metrics.n, metrics.n_positive),
            metrics,
        ))
    }
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
