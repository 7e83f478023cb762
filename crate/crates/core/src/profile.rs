//! Per-individual behavior profiles and alignment of test-period trips to
//! training-period clusters.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{ClusterModel, TripFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    pub individual_id: String,
    /// Cluster distribution.
    pub d: Vec<f64>,
    /// Row-stochastic cluster transition matrix.
    pub m: Vec<Vec<f64>>,
    /// Dominant cluster.
    pub c: usize,
    /// Entropy of `d` in bits.
    pub h: f64,
    /// Trip count.
    pub n: usize,
}

impl BehaviorProfile {
    pub fn k(&self) -> usize {
        self.d.len()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn dominant(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in d.iter().enumerate() {
        if *v > d[best] {
            best = i;
        }
    }
    best
}

pub fn entropy_bits(d: &[f64]) -> f64 {
    -d.iter().filter(|p| **p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

/// Builds a profile from the time-ordered cluster ids of one individual's
/// trips. Transition rows use add-one smoothing, so an individual with a
/// single trip gets a uniform matrix.
pub fn build_profile(individual_id: &str, sequence: &[usize], k: usize) -> Result<BehaviorProfile> {
    if sequence.is_empty() {
        return Err(Error::InvalidInput(format!("individual {individual_id} has no trips in the period")));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if let Some(bad) = sequence.iter().find(|c| **c >= k) {
        return Err(Error::InvalidInput(format!("cluster id {bad} out of range for k={k}")));
    }
    let n = sequence.len();
    let mut counts = vec![0usize; k];
    for &c in sequence {
        counts[c] += 1;
    }
    let d: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();

    let mut trans = vec![vec![1.0; k]; k];
    for pair in sequence.windows(2) {
        trans[pair[0]][pair[1]] += 1.0;
    }
    for row in &mut trans {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(BehaviorProfile { individual_id: individual_id.to_string(), c: dominant(&d), h: entropy_bits(&d), d, m: trans, n })
}

/// Nearest center by Euclidean distance; ties go to the lowest index.
pub fn align_cluster(z_mean: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = z_mean.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Label map that orders clusters by their centers, compared coordinate by
/// coordinate. Relabeling through it makes cluster ids independent of the
/// order the model happens to store its clusters in.
pub fn canonical_labels(centers: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| {
        centers[a]
            .iter()
            .zip(&centers[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut label = vec![0; centers.len()];
    for (rank, &k) in order.iter().enumerate() {
        label[k] = rank;
    }
    label
}

/// One individual's trips for a period, already ordered by start time.
#[derive(Clone, Debug)]
pub struct IndividualTrips<'a> {
    pub individual_id: &'a str,
    pub trips: Vec<&'a TripFeatures>,
}

/// Encodes every trip and aligns it to the nearest center, returning the
/// canonical cluster id sequence per individual.
pub fn assign_clusters(
    individuals: &[IndividualTrips<'_>],
    model: &ClusterModel,
    centers: &[Vec<f64>],
    exec: Execution,
) -> Result<BTreeMap<String, Vec<usize>>> {
    if centers.len() != model.k() {
        return Err(Error::InvalidInput(format!("{} centers for a model with k={}", centers.len(), model.k())));
    }
    let labels = canonical_labels(centers);
    let assigned = exec.map(individuals, |ind| -> Result<(String, Vec<usize>)> {
        let ids = ind
            .trips
            .iter()
            .map(|t| model.encode(t).map(|s| labels[align_cluster(&s.z_mean, centers)]))
            .collect::<Result<Vec<_>>>()?;
        Ok((ind.individual_id.to_string(), ids))
    });
    assigned.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    period: Period,
    #[serde(flatten)]
    profile: BehaviorProfile,
}

/// Writes one JSON object per line, training profiles first.
pub fn write_profiles<W: Write>(
    mut sink: W,
    train: &BTreeMap<String, BehaviorProfile>,
    test: &BTreeMap<String, BehaviorProfile>,
) -> Result<()> {
    let io = |e| Error::io("profiles", e);
    for (period, map) in [(Period::Train, train), (Period::Test, test)] {
        for profile in map.values() {
            let line = serde_json::to_string(&ProfileRecord { period, profile: profile.clone() })
                .map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(sink, "{line}").map_err(io)?;
        }
    }
    Ok(())
}

pub type ProfileTables = (BTreeMap<String, BehaviorProfile>, BTreeMap<String, BehaviorProfile>);

pub fn read_profiles<R: BufRead>(source: R) -> Result<ProfileTables> {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::io("profiles", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProfileRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("profiles line {}: {e}", i + 1)))?;
        let table = if rec.period == Period::Train { &mut train } else { &mut test };
        table.insert(rec.profile.individual_id.clone(), rec.profile);
    }
    Ok((train, test))
}
