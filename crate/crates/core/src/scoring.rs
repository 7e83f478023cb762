//! Behavioral-change scores between a training and a test profile, and the
//! weighted total used for ranking individuals.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::profile::BehaviorProfile;

/// Training mass at or below this counts as a cluster the individual never used.
pub const UNSEEN_EPSILON: f64 = 1e-6;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub w_dist: f64,
    pub w_new: f64,
    pub w_trans: f64,
    pub w_entropy: f64,
    pub w_freq: f64,
    pub w_dominant: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { w_dist: 0.25, w_new: 0.20, w_trans: 0.15, w_entropy: 0.15, w_freq: 0.15, w_dominant: 0.10 }
    }
}

impl ScoreWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.w_dist, self.w_new, self.w_trans, self.w_entropy, self.w_freq, self.w_dominant]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("scoring.weights", "weights must be finite and non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("scoring.weights", format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidInput(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter().zip(m).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).log2()).sum()
}

/// Jensen-Shannon divergence with base-2 logarithms, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput("distributions differ in length".into()));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(js.clamp(0.0, 1.0))
}

/// Test-period mass on clusters the training period never used.
pub fn new_behavior_mass(d_train: &[f64], d_test: &[f64]) -> f64 {
    let mass: f64 = d_train.iter().zip(d_test).filter(|(tr, _)| **tr <= UNSEEN_EPSILON).map(|(_, te)| te).sum();
    mass.clamp(0.0, 1.0)
}

/// Frobenius distance divided by its supremum `sqrt(2K)` over pairs of
/// row-stochastic matrices.
pub fn transition_change(m_train: &[Vec<f64>], m_test: &[Vec<f64>]) -> Result<f64> {
    let k = m_train.len();
    if k == 0 || m_test.len() != k || m_train.iter().chain(m_test).any(|r| r.len() != k) {
        return Err(Error::InvalidInput("transition matrices must both be K x K".into()));
    }
    for (i, row) in m_train.iter().chain(m_test).enumerate() {
        check_distribution(row, &format!("transition row {}", i % k))?;
    }
    let sq: f64 = m_train.iter().flatten().zip(m_test.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq.sqrt() / (2.0 * k as f64).sqrt()).min(1.0))
}

pub fn entropy_change(h_train: f64, h_test: f64, k: usize) -> f64 {
    if k < 2 {
        return 0.0;
    }
    ((h_train - h_test).abs() / (k as f64).log2()).min(1.0)
}

pub fn frequency_change(n_train: usize, n_test: usize) -> f64 {
    let max = n_train.max(n_test);
    if max == 0 {
        0.0
    } else {
        n_train.abs_diff(n_test) as f64 / max as f64
    }
}

pub fn dominant_change(c_train: usize, c_test: usize) -> f64 {
    if c_train == c_test {
        0.0
    } else {
        1.0
    }
}

pub const NO_TEST_TRIPS: &str = "no_test_trips";
pub const NO_TRAIN_TRIPS: &str = "no_train_trips";

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    pub individual_id: String,
    /// Distribution, new behavior, transition, entropy, frequency, dominant.
    pub components: [f64; 6],
    pub total: f64,
    pub flags: Vec<String>,
}

pub const SCORE_HEADER: [&str; 9] =
    ["individual_id", "s_dist", "s_new", "s_trans", "s_entropy", "s_freq", "s_dominant", "total", "flags"];

/// Scores one individual. A missing test profile compares the training
/// profile against itself, so only the frequency component fires.
pub fn anomaly_score(
    train: &BehaviorProfile,
    test: Option<&BehaviorProfile>,
    weights: &ScoreWeights,
) -> Result<AnomalyReport> {
    let mut flags = Vec::new();
    let (test, n_test) = match test {
        Some(t) => {
            if t.k() != train.k() {
                return Err(Error::InvalidInput(format!(
                    "profiles of {} have different cluster counts",
                    train.individual_id
                )));
            }
            (t, t.n)
        }
        None => {
            flags.push(NO_TEST_TRIPS.to_string());
            (train, 0)
        }
    };
    let components = [
        js_divergence(&train.d, &test.d)?,
        new_behavior_mass(&train.d, &test.d),
        transition_change(&train.m, &test.m)?,
        entropy_change(train.h, test.h, train.k()),
        frequency_change(train.n, n_test),
        dominant_change(train.c, test.c),
    ];
    let total = components.iter().zip(weights.as_array()).map(|(s, w)| w * s).sum();
    Ok(AnomalyReport { individual_id: train.individual_id.clone(), components, total, flags })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    /// Sorted by total descending, then individual id ascending.
    pub ranked: Vec<AnomalyReport>,
    /// Individuals with test trips but no training profile.
    pub excluded: Vec<AnomalyReport>,
}

pub fn score_all(
    train: &BTreeMap<String, BehaviorProfile>,
    test: &BTreeMap<String, BehaviorProfile>,
    weights: &ScoreWeights,
    exec: Execution,
) -> Result<ScoreTable> {
    weights.validate()?;
    let profiles: Vec<&BehaviorProfile> = train.values().collect();
    let mut ranked = exec
        .map(&profiles, |p| anomaly_score(p, test.get(&p.individual_id), weights))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.individual_id.cmp(&b.individual_id)));
    let excluded = test
        .keys()
        .filter(|id| !train.contains_key(*id))
        .map(|id| AnomalyReport {
            individual_id: id.clone(),
            components: [f64::NAN; 6],
            total: f64::NAN,
            flags: vec![NO_TRAIN_TRIPS.to_string()],
        })
        .collect();
    Ok(ScoreTable { ranked, excluded })
}

/// Ranked rows first, excluded individuals after them with empty scores.
pub fn write_scores<W: Write>(sink: W, table: &ScoreTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let err = |e: csv::Error| Error::Parse(format!("writing scores: {e}"));
    w.write_record(SCORE_HEADER).map_err(err)?;
    for r in &table.ranked {
        let mut row = vec![r.individual_id.clone()];
        row.extend(r.components.iter().map(|v| format!("{v:.17}")));
        row.push(format!("{:.17}", r.total));
        row.push(r.flags.join(";"));
        w.write_record(&row).map_err(err)?;
    }
    for r in &table.excluded {
        let mut row = vec![r.individual_id.clone()];
        row.extend(std::iter::repeat_n(String::new(), 7));
        row.push(r.flags.join(";"));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("scores", e))
}

/// Reads `(individual_id, total)` for every ranked row.
pub fn read_score_totals<R: std::io::Read>(source: R) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("scores: {e}")))?;
        let total = rec.get(7).unwrap_or("");
        if total.is_empty() {
            continue;
        }
        let total: f64 = total.parse().map_err(|_| Error::Parse(format!("scores: bad total {total:?}")))?;
        out.push((rec.get(0).unwrap_or("").to_string(), total));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::build_profile;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn js_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!(close(js_divergence(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0));
        let p = [0.5, 0.5, 0.0];
        let q = [0.9, 0.1, 0.0];
        let m = [0.7, 0.3];
        let expect = 0.5 * (0.5 * (0.5f64 / m[0]).log2() + 0.5 * (0.5f64 / m[1]).log2())
            + 0.5 * (0.9 * (0.9f64 / m[0]).log2() + 0.1 * (0.1f64 / m[1]).log2());
        assert!(close(js_divergence(&p, &q).unwrap(), expect));
        assert!(js_divergence(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn new_mass_examples() {
        let d = [0.5, 0.5, 0.0, 0.0];
        assert_eq!(new_behavior_mass(&d, &d), 0.0);
        assert_eq!(new_behavior_mass(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(new_behavior_mass(&d, &[0.25, 0.25, 0.5, 0.0]), 0.5);
    }

    #[test]
    fn transition_examples() {
        let a = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(transition_change(&a, &a).unwrap(), 0.0);
        assert!(close(transition_change(&a, &b).unwrap(), 1.0));
        assert!(transition_change(&a, &[vec![0.5, 0.4], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn entropy_frequency_dominant_examples() {
        assert_eq!(entropy_change(1.2, 1.2, 6), 0.0);
        assert!(close(entropy_change(0.0, 6f64.log2(), 6), 1.0));
        assert!((entropy_change(1.0, 0.0, 6) - 0.3869).abs() < 1e-4);
        assert_eq!(frequency_change(7, 7), 0.0);
        assert_eq!(frequency_change(10, 5), 0.5);
        assert_eq!(frequency_change(10, 0), 1.0);
        assert_eq!(dominant_change(3, 3), 0.0);
        assert_eq!(dominant_change(2, 5), 1.0);
    }

    #[test]
    fn tied_dominant_uses_lowest_index() {
        let train = build_profile("a", &[1, 2], 4).unwrap();
        let test = build_profile("a", &[2, 1, 2, 1], 4).unwrap();
        assert_eq!((train.c, test.c), (1, 1));
        let r = anomaly_score(&train, Some(&test), &ScoreWeights::default()).unwrap();
        assert_eq!(r.components[5], 0.0);
        let test = build_profile("a", &[2, 2, 1], 4).unwrap();
        let r = anomaly_score(&train, Some(&test), &ScoreWeights::default()).unwrap();
        assert_eq!(r.components[5], 1.0);
    }

    #[test]
    fn weighted_total() {
        let w = ScoreWeights::default();
        let p = build_profile("a", &[0, 1, 1, 2], 6).unwrap();
        let r = anomaly_score(&p, Some(&p), &w).unwrap();
        assert_eq!(r.components, [0.0; 6]);
        assert_eq!(r.total, 0.0);
        // distribution shift alone carries its weight
        let total: f64 = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0].iter().zip(w.as_array()).map(|(s, w)| s * w).sum();
        assert_eq!(total, 0.25);
        let ones: f64 = w.as_array().iter().sum();
        assert!((ones - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_test_period_only_moves_frequency() {
        let p = build_profile("a", &[0, 3, 3], 6).unwrap();
        let r = anomaly_score(&p, None, &ScoreWeights::default()).unwrap();
        assert_eq!(r.components, [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.total, 0.15);
        assert_eq!(r.flags, vec![NO_TEST_TRIPS.to_string()]);
    }

    #[test]
    fn ranking_and_exclusion() {
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for (id, tr, te) in [("b", vec![0, 0], vec![1, 1]), ("a", vec![0, 0], vec![1, 1]), ("c", vec![0], vec![0])] {
            train.insert(id.to_string(), build_profile(id, &tr, 3).unwrap());
            test.insert(id.to_string(), build_profile(id, &te, 3).unwrap());
        }
        test.insert("z".into(), build_profile("z", &[2], 3).unwrap());
        let table = score_all(&train, &test, &ScoreWeights::default(), Execution::Sequential).unwrap();
        let ids: Vec<&str> = table.ranked.iter().map(|r| r.individual_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(table.excluded.len(), 1);
        let mut buf = Vec::new();
        write_scores(&mut buf, &table).unwrap();
        let totals = read_score_totals(buf.as_slice()).unwrap();
        assert_eq!(totals.len(), 3);
        assert_eq!(totals[2], ("c".to_string(), 0.0));
        assert_eq!(totals[0].1, table.ranked[0].total);
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = ScoreWeights { w_dist: 0.5, ..ScoreWeights::default() };
        assert!(w.validate().is_err());
        let w = ScoreWeights { w_dist: -0.25, w_new: 0.7, ..ScoreWeights::default() };
        assert!(w.validate().is_err());
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], k).prop_filter_map("non-zero", |v| {
            let s: f64 = v.iter().sum();
            (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    fn seq() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..5, 1..25)
    }

    proptest! {
        #[test]
        fn components_symmetric_and_bounded(p in simplex(5), q in simplex(5), a in 0usize..50, b in 0usize..50) {
            let pq = js_divergence(&p, &q).unwrap();
            prop_assert_eq!(pq, js_divergence(&q, &p).unwrap());
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert!((0.0..=1.0).contains(&new_behavior_mass(&p, &q)));
            prop_assert_eq!(frequency_change(a, b), frequency_change(b, a));
            prop_assert!((0.0..=1.0).contains(&frequency_change(a, b)));
        }

        #[test]
        fn profile_scores_bounded(s1 in seq(), s2 in seq()) {
            let w = ScoreWeights::default();
            let p = build_profile("x", &s1, 5).unwrap();
            let q = build_profile("x", &s2, 5).unwrap();
            let r = anomaly_score(&p, Some(&q), &w).unwrap();
            prop_assert!(r.components.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.total));
            let back = anomaly_score(&q, Some(&p), &w).unwrap();
            prop_assert_eq!(r.components[2], back.components[2]);
            prop_assert_eq!(r.components[3], back.components[3]);
            prop_assert_eq!(anomaly_score(&p, Some(&p), &w).unwrap().total, 0.0);
        }

        #[test]
        fn total_monotone_in_each_component(base in prop::collection::vec(0.0f64..1.0, 6), i in 0usize..6, bump in 0.0f64..1.0) {
            let w = ScoreWeights::default().as_array();
            let total = |c: &[f64]| c.iter().zip(w).map(|(s, w)| s * w).sum::<f64>();
            let mut raised = base.clone();
            raised[i] = (raised[i] + bump).min(1.0);
            prop_assert!(total(&raised) >= total(&base));
        }

        #[test]
        fn random_stochastic_matrices_bounded(rows_a in prop::collection::vec(simplex(4), 4), rows_b in prop::collection::vec(simplex(4), 4)) {
            let v = transition_change(&rows_a, &rows_b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, transition_change(&rows_b, &rows_a).unwrap());
        }
    }
}
