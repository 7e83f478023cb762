//! Pipeline configuration: one TOML document, every field defaulted, any
//! field overridable by its dotted name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{parse_timestamp, SegmentParams, Timestamp};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::scoring::ScoreWeights;
use crate::spatial::{check_radii, DEFAULT_RADII_M};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Relative paths resolve against the run directory.
    pub staypoints: PathBuf,
    pub geo_features: PathBuf,
    pub labels: PathBuf,
    /// TOML category mapping; the built-in mapping when absent.
    pub category_mapping: Option<PathBuf>,
    pub delimiter: char,
    /// Trips starting before this instant form the training period.
    pub boundary: String,
    pub tz_offset_hours: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            staypoints: crate::synth::STAYPOINTS_FILE.into(),
            geo_features: crate::synth::GEO_FILE.into(),
            labels: crate::synth::LABELS_FILE.into(),
            category_mapping: None,
            delimiter: ',',
            // local midnight (UTC-8) three weeks after the synthetic start date
            boundary: "2024-01-22T08:00:00Z".into(),
            tz_offset_hours: -8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialConfig {
    pub resolution: u8,
    pub radii: Vec<f64>,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self { resolution: 10, radii: DEFAULT_RADII_M.to_vec() }
    }
}

/// Which stages `all` runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub ingest: bool,
    pub index: bool,
    pub features: bool,
    pub train: bool,
    pub profile: bool,
    pub score: bool,
    pub evaluate: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { ingest: true, index: true, features: true, train: true, profile: true, score: true, evaluate: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Use the data-parallel strategy when the crate is built with it.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { parallel: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub segment: SegmentParams,
    pub spatial: SpatialConfig,
    pub model: ModelConfig,
    pub scoring: ScoreWeights,
    pub synth: SynthConfig,
    pub stages: StageToggles,
    pub run: RunConfig,
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    // serde reports unknown keys as "unknown field `name`"
    let field = msg
        .split("unknown field `")
        .nth(1)
        .and_then(|rest| rest.split('`').next())
        .unwrap_or("config")
        .to_string();
    Error::config(field, msg.trim().replace('\n', " "))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are read as TOML literals,
    /// falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own serialization parses");
        let known: toml::Table = toml::from_str(&PipelineConfig::default().to_toml()).expect("defaults parse");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::config(raw, "override must look like section.field=value"))?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            if !is_known(&known, &path) {
                return Err(Error::config(key, "no such configuration field"));
            }
            let value = parse_value(value.trim());
            set_path(&mut table, &path, value);
        }
        let text = toml::to_string(&table).expect("table serializes");
        toml::from_str(&text).map_err(|e| {
            let mut err = toml_err(e);
            if let (Error::Config { field, .. }, Some(last)) = (&mut err, overrides.last()) {
                if field == "config" {
                    *field = last.as_ref().split('=').next().unwrap_or("config").trim().to_string();
                }
            }
            err
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment.gap_threshold_secs < 0 {
            return Err(Error::config("segment.gap_threshold_secs", "must be non-negative"));
        }
        if self.segment.min_trip_length == 0 {
            return Err(Error::config("segment.min_trip_length", "must be positive"));
        }
        self.boundary()?;
        if !self.data.tz_offset_hours.is_finite() || self.data.tz_offset_hours.abs() > 14.0 {
            return Err(Error::config("data.tz_offset_hours", "must lie in [-14, 14]"));
        }
        if !self.data.delimiter.is_ascii() {
            return Err(Error::config("data.delimiter", "must be a single ASCII character"));
        }
        crate::spatial::index::resolution_from(self.spatial.resolution)
            .map_err(|_| Error::config("spatial.resolution", "must be an H3 resolution in 0..=15"))?;
        check_radii(&self.spatial.radii).map_err(|e| Error::config("spatial.radii", e.to_string()))?;
        self.model.validate()?;
        self.scoring.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn boundary(&self) -> Result<Timestamp> {
        parse_timestamp(&self.data.boundary).map_err(|e| Error::config("data.boundary", e))
    }

    pub fn execution(&self) -> Execution {
        if self.run.parallel {
            Execution::default()
        } else {
            Execution::Sequential
        }
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn is_known(table: &toml::Table, path: &[&str]) -> bool {
    match path {
        [] => false,
        [last] => table.contains_key(*last) || optional_fields(table).contains(last),
        [head, rest @ ..] => matches!(table.get(*head), Some(toml::Value::Table(t)) if is_known(t, rest)),
    }
}

/// Fields that serialize to nothing when unset.
fn optional_fields(table: &toml::Table) -> &'static [&'static str] {
    if table.contains_key("staypoints") {
        &["category_mapping"]
    } else {
        &[]
    }
}

/// Timestamps stay strings: every time field in the config is textual.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_datetime())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) {
    match path {
        [last] => {
            table.insert(last.to_string(), value);
        }
        [head, rest @ ..] => {
            let entry = table.entry(head.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            if let toml::Value::Table(t) = entry {
                set_path(t, rest, value);
            }
        }
        [] => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_constants() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model.k, 6);
        assert_eq!((c.model.alpha, c.model.beta), (1.5, 1.2));
        assert_eq!(c.segment.gap_threshold_secs, 1800);
        assert_eq!(c.spatial.radii, vec![500.0, 1000.0, 2000.0]);
        assert_eq!(c.scoring.as_array(), [0.25, 0.20, 0.15, 0.15, 0.15, 0.10]);
        assert_eq!(c.boundary().unwrap(), c.synth.boundary(c.data.tz_offset_hours).unwrap());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = PipelineConfig::from_toml("[model]\nk = 4\n").unwrap();
        assert_eq!(partial.model.k, 4);
        assert_eq!(partial.model.hidden, c.model.hidden);
        let err = PipelineConfig::from_toml("[model]\nkay = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "kay"), "{err}");
    }

    #[test]
    fn dotted_overrides() {
        let c = PipelineConfig::default()
            .with_overrides(&["model.k=8", "scoring.w_dist=0.3", "data.boundary=2024-02-01T00:00:00Z", "model.use_spatial=false"])
            .unwrap();
        assert_eq!(c.model.k, 8);
        assert_eq!(c.scoring.w_dist, 0.3);
        assert_eq!(c.data.boundary, "2024-02-01T00:00:00Z");
        assert!(!c.model.use_spatial);
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "scoring.weights"));
        let c = PipelineConfig::default().with_overrides(&["data.category_mapping=map.toml"]).unwrap();
        assert_eq!(c.data.category_mapping, Some(PathBuf::from("map.toml")));

        let err = PipelineConfig::default().with_overrides(&["model.depth=3"]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.depth"));
        let err = PipelineConfig::default().with_overrides(&["model.k=six"]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.k"), "{err}");
        assert!(PipelineConfig::default().with_overrides(&["model.k"]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = a.with_overrides(&["model.seed=3"]).unwrap();
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
