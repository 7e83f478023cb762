//! Mini-batch training with Adam.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{batch_objective, sample_noise, LossBreakdown, Schedule};
use super::nn;
use super::{ClusterModel, ModelConfig, TripFeatures};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// False during reconstruction-only pretraining.
    pub clustering: bool,
    pub kl_weight: f64,
    /// Batch-size weighted mean of the objective over the epoch.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The trained model, or the last good end-of-epoch model on divergence.
    pub model: ClusterModel,
    pub history: Vec<EpochRecord>,
    /// `(epoch, detail)` when training stopped on a non-finite loss.
    pub diverged: Option<(usize, String)>,
}

impl TrainOutcome {
    pub fn divergence_error(&self) -> Option<Error> {
        self.diverged.as_ref().map(|(epoch, detail)| Error::Diverged { epoch: *epoch, detail: detail.clone() })
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

const KMEANS_RESTARTS: usize = 10;

/// Pretraining epochs optimize reconstruction alone; the KL warm-up starts
/// with the first joint epoch.
fn schedule(config: &ModelConfig, epoch: usize) -> Schedule {
    let Some(joint) = epoch.checked_sub(config.pretrain_epochs) else {
        return Schedule { kl: 0.0, clustering: 0.0 };
    };
    let kl = if config.kl_warmup_epochs == 0 { 1.0 } else { (joint as f64 / config.kl_warmup_epochs as f64).min(1.0) };
    Schedule { kl, clustering: 1.0 }
}

fn init_embeddings(model: &mut ClusterModel, trips: &[TripFeatures], rng: &mut ChaCha8Rng, exec: Execution) -> Result<()> {
    let states = model.encode_all(trips, exec)?;
    let points: Vec<Vec<f64>> = states.into_iter().map(|s| s.z_mean).collect();
    let centers = kmeans_restarts(&points, model.k(), 50, KMEANS_RESTARTS, rng);
    let l = model.latent_dim();
    for (k, c) in centers.iter().enumerate() {
        let at = model.layout.emb.start + k * l;
        model.params[at..at + l].copy_from_slice(c);
    }
    Ok(())
}

/// Trains a fresh model on training-period trips. Deterministic for a given
/// seed regardless of the execution strategy.
pub fn train(
    trips: &[TripFeatures],
    config: &ModelConfig,
    temporal_dim: usize,
    spatial_dim: usize,
    exec: Execution,
) -> Result<TrainOutcome> {
    let model = ClusterModel::init(config.clone(), temporal_dim, spatial_dim)?;
    train_from(model, trips, exec)
}

/// Continues training an initialized model.
pub fn train_from(mut model: ClusterModel, trips: &[TripFeatures], exec: Execution) -> Result<TrainOutcome> {
    let config = model.config.clone();
    if trips.len() < config.k {
        return Err(Error::InvalidInput(format!("training needs at least k={} trips, got {}", config.k, trips.len())));
    }
    if trips.iter().any(|t| t.len == 0) {
        return Err(Error::InvalidInput("training set contains an empty trip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);

    let mut adam = Adam::new(model.params.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..trips.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut grad = Vec::new();
    for epoch in 0..config.pretrain_epochs + config.epochs {
        if epoch == config.pretrain_epochs && config.kmeans_init {
            init_embeddings(&mut model, trips, &mut rng, exec)?;
        }
        let snapshot = model.params.clone();
        let phase = schedule(&config, epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&TripFeatures> = idx.iter().map(|&i| &trips[i]).collect();
            let eps = sample_noise(&mut rng, batch.len(), model.latent_dim());
            let loss = batch_objective(&model, &batch, &eps, phase, Some(&mut grad), exec);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                model.params = snapshot;
                return Ok(TrainOutcome { model, history, diverged: Some((epoch, format!("{loss}"))) });
            }
            if config.grad_clip > 0.0 {
                let norm = nn::dot(&grad, &grad).sqrt();
                if norm > config.grad_clip {
                    let s = config.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.update(&mut model.params, &grad);
            let wgt = batch.len() as f64;
            sum.total += wgt * loss.total;
            sum.recon += wgt * loss.recon;
            sum.mse_temporal += wgt * loss.mse_temporal;
            sum.mse_spatial += wgt * loss.mse_spatial;
            sum.kl += wgt * loss.kl;
            sum.entropy += wgt * loss.entropy;
            sum.center += wgt * loss.center;
        }
        let n = trips.len() as f64;
        let mean = LossBreakdown {
            total: sum.total / n,
            recon: sum.recon / n,
            mse_temporal: sum.mse_temporal / n,
            mse_spatial: sum.mse_spatial / n,
            kl: sum.kl / n,
            entropy: sum.entropy / n,
            center: sum.center / n,
        };
        if model.params.iter().any(|v| !v.is_finite()) {
            model.params = snapshot;
            return Ok(TrainOutcome { model, history, diverged: Some((epoch, "non-finite parameters".into())) });
        }
        history.push(EpochRecord { epoch, clustering: phase.clustering > 0.0, kl_weight: phase.kl, loss: mean });
    }
    Ok(TrainOutcome { model, history, diverged: None })
}

/// Best of `restarts` k-means runs by within-cluster sum of squares.
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, iterations: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..restarts.max(1) {
        let centers = kmeans(points, k, iterations, rng);
        let inertia: f64 = points.iter().map(|p| nn::sq_dist(p, &centers[nearest(p, &centers)])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centers));
        }
    }
    best.expect("at least one restart").1
}

/// k-means++ seeding followed by Lloyd iterations; an emptied cluster keeps
/// its previous center.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    assert!(n >= k && k > 0, "kmeans needs at least k points");
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| nn::sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(nn::sq_dist(p, c));
        }
    }
    let dim = points[0].len();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let best = nearest(p, &centers);
            nn::axpy(1.0, p, &mut sums[best]);
            counts[best] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            if new != centers[c] {
                moved = true;
                centers[c] = new;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = nn::sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
