//! Ranking metrics against per-individual ground-truth labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub individual_id: String,
    pub score: f64,
    pub positive: bool,
}

impl Labeled {
    pub fn new(id: impl Into<String>, score: f64, positive: bool) -> Self {
        Self { individual_id: id.into(), score, positive }
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Sort-based, `O(n log n)`.
pub fn auroc(data: &[Labeled]) -> Result<f64> {
    let n_pos = data.iter().filter(|d| d.positive).count();
    let n_neg = data.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined { metric: "auroc", reason: "labels contain a single class".into() });
    }
    let mut sorted: Vec<&Labeled> = data.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // for each block of tied scores, positives beat every negative below the
    // block and split the negatives inside it
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let pos = sorted[i..j].iter().filter(|d| d.positive).count();
        let neg = (j - i) - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Ranks by score descending, then individual id ascending.
pub fn rank_order(data: &[Labeled]) -> Vec<&Labeled> {
    let mut sorted: Vec<&Labeled> = data.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.individual_id.cmp(&b.individual_id)));
    sorted
}

/// Mean of precision at the rank of each positive.
pub fn average_precision(data: &[Labeled]) -> Result<f64> {
    let n_pos = data.iter().filter(|d| d.positive).count();
    if n_pos == 0 {
        return Err(Error::MetricUndefined { metric: "average_precision", reason: "no positive labels".into() });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, d) in rank_order(data).into_iter().enumerate() {
        if d.positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

pub fn read_labels<R: Read>(source: R) -> Result<BTreeMap<String, bool>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let mut out = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("labels: {e}")))?;
        let line = i + 2;
        let id = rec.get(0).filter(|s| !s.is_empty()).ok_or_else(|| Error::Parse(format!("labels line {line}: missing id")))?;
        let label = match rec.get(1) {
            Some("1") => true,
            Some("0") => false,
            other => return Err(Error::Parse(format!("labels line {line}: label must be 0 or 1, got {other:?}"))),
        };
        out.insert(id.to_string(), label);
    }
    Ok(out)
}

pub fn write_labels<W: Write>(sink: W, labels: &BTreeMap<String, bool>) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let err = |e: csv::Error| Error::Parse(format!("writing labels: {e}"));
    w.write_record(["individual_id", "label"]).map_err(err)?;
    for (id, l) in labels {
        w.write_record([id.as_str(), if *l { "1" } else { "0" }]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("labels", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub ap: f64,
    pub n: usize,
    pub n_positive: usize,
    /// Labeled individuals that received no score.
    pub unscored: usize,
}

/// Joins scores with labels on individual id and computes both metrics.
pub fn evaluate(scores: &[(String, f64)], labels: &BTreeMap<String, bool>) -> Result<Metrics> {
    let data: Vec<Labeled> = scores
        .iter()
        .filter_map(|(id, s)| labels.get(id).map(|l| Labeled::new(id.clone(), *s, *l)))
        .collect();
    let scored: std::collections::BTreeSet<&str> = scores.iter().map(|(id, _)| id.as_str()).collect();
    let unscored = labels.keys().filter(|id| !scored.contains(id.as_str())).count();
    Ok(Metrics {
        auroc: auroc(&data)?,
        ap: average_precision(&data)?,
        n: data.len(),
        n_positive: data.iter().filter(|d| d.positive).count(),
        unscored,
    })
}
