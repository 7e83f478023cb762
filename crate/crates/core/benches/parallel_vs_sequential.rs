//! Sequential vs data-parallel execution of the three hot loops: buffer
//! feature extraction, batch gradients and per-individual scoring.

use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mobility_anomaly::data::{segment_trips, split_periods, SegmentParams};
use mobility_anomaly::features::FeatureSet;
use mobility_anomaly::model::loss::loss_and_gradient;
use mobility_anomaly::model::{ClusterModel, ModelConfig, TripFeatures};
use mobility_anomaly::profile::build_profile;
use mobility_anomaly::scoring::{score_all, ScoreWeights};
use mobility_anomaly::spatial::category::DEFAULT_CATEGORIES;
use mobility_anomaly::spatial::index::build_index;
use mobility_anomaly::spatial::{BufferQuery, DEFAULT_RADII_M};
use mobility_anomaly::synth::{generate, SynthConfig};
use mobility_anomaly::Execution;

fn strategies() -> Vec<(&'static str, Execution)> {
    vec![("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn features(c: &mut Criterion) {
    let cfg = SynthConfig { n_individuals: 60, anomaly_rate: 0.05, ..SynthConfig::default() };
    let out = generate(&cfg, -8.0, Execution::Sequential).unwrap();
    let cats: Vec<String> = DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect();
    let (index, _) = build_index(&out.features, h3o::Resolution::Ten, &cats, Execution::Sequential);
    let query = BufferQuery::new(&index);
    let mut by_id: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for sp in &out.staypoints {
        by_id.entry(sp.individual_id.as_str()).or_default().push(sp.clone());
    }
    let trips = by_id.values().flat_map(|sps| segment_trips(sps, SegmentParams::default()).unwrap().trips).collect();
    let split = split_periods(trips, out.boundary);

    let mut group = c.benchmark_group("buffer_features");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| FeatureSet::compute(&split.train_trips, &split.test_trips, &query, &DEFAULT_RADII_M, -8.0, exec).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<TripFeatures> = (0..64)
        .map(|_| {
            let len = rng.random_range(4..8);
            let t = (0..len * 42).map(|_| rng.random::<f64>()).collect();
            let s = (0..len * 39).map(|_| rng.random::<f64>() * 3.0).collect();
            TripFeatures::new(t, s, len)
        })
        .collect();
    let model = ClusterModel::init(ModelConfig::default(), 42, 39).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(20);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_gradient(black_box(&batch), &model, 3, true, exec).unwrap())
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for i in 0..20_000 {
        let id = format!("ind{i:05}");
        let seq = |rng: &mut ChaCha8Rng| (0..rng.random_range(3..30)).map(|_| rng.random_range(0..6)).collect::<Vec<usize>>();
        train.insert(id.clone(), build_profile(&id, &seq(&mut rng), 6).unwrap());
        test.insert(id.clone(), build_profile(&id, &seq(&mut rng), 6).unwrap());
    }
    let weights = ScoreWeights::default();
    let mut group = c.benchmark_group("scoring");
    group.sample_size(20);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| score_all(&train, &test, &weights, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, features, gradients, scoring);
criterion_main!(benches);
