//! Recurrent variational clustering model over trips.
//!
//! Each staypoint's temporal and spatial blocks are projected to the hidden
//! width, fused, and fed to a GRU. The last hidden state yields the latent
//! mean and log-variance. Cluster responsibilities are a softmax over
//! negative squared distances from the latent mean to the cluster embedding
//! table, which also defines the cluster part of the latent code
//! (`z = z_c + z_b`). A position-conditioned decoder reconstructs both
//! feature blocks per staypoint.

pub mod checkpoint;
pub mod loss;
mod nn;
pub mod train;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub use loss::{total_loss, LossBreakdown};
pub use train::{train, TrainOutcome};

/// Width of the decoder's position encoding.
pub const POSITION_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k: usize,
    pub hidden: usize,
    pub latent: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Reconstruction-only epochs before the clustering terms switch on.
    pub pretrain_epochs: usize,
    /// Joint epochs with every loss term.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// KL weight ramps linearly from 0 to 1 over this many epochs.
    pub kl_warmup_epochs: usize,
    /// Weight of the KL term once warm-up is over.
    pub kl_weight: f64,
    /// Weight of the `sum gamma ln gamma` term. Minimizing that term with a
    /// positive weight flattens the responsibilities toward uniform, so the
    /// default of -1 is what rewards confident assignments.
    pub entropy_weight: f64,
    /// Softmax temperature of the distance-based responsibilities.
    pub temperature: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Initialize cluster embeddings by k-means on the initial latent means.
    pub kmeans_init: bool,
    pub use_temporal: bool,
    pub use_spatial: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 6,
            hidden: 64,
            latent: 16,
            alpha: 1.5,
            beta: 1.2,
            pretrain_epochs: 10,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            kl_warmup_epochs: 10,
            kl_weight: 1.0,
            entropy_weight: -1.0,
            temperature: 1.0,
            grad_clip: 5.0,
            kmeans_init: true,
            use_temporal: true,
            use_spatial: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{name}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("k", self.k)?;
        positive("hidden", self.hidden)?;
        positive("latent", self.latent)?;
        positive("batch_size", self.batch_size)?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("grad_clip", self.grad_clip)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("model.{name}"), "must be finite and non-negative"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("model.learning_rate", "must be positive"));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::config("model.kl_weight", "must be finite and non-negative"));
        }
        if !self.entropy_weight.is_finite() {
            return Err(Error::config("model.entropy_weight", "must be finite"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("model.temperature", "must be positive"));
        }
        if !self.use_temporal && !self.use_spatial {
            return Err(Error::config("model.use_temporal", "at least one feature block must be enabled"));
        }
        Ok(())
    }

    /// Reconstruction weights after feature-block ablation.
    pub fn recon_weights(&self) -> (f64, f64) {
        (
            if self.use_temporal { self.alpha } else { 0.0 },
            if self.use_spatial { self.beta } else { 0.0 },
        )
    }
}

/// Offsets of every parameter tensor in the flat parameter vector. Tensors
/// are row-major; a weight of shape `out x in` maps `in`-vectors to
/// `out`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub temporal_dim: usize,
    pub spatial_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub k: usize,
    pub t_w: Range<usize>,
    pub t_b: Range<usize>,
    pub s_w: Range<usize>,
    pub s_b: Range<usize>,
    pub f_w: Range<usize>,
    pub f_b: Range<usize>,
    pub wz: Range<usize>,
    pub uz: Range<usize>,
    pub bz: Range<usize>,
    pub wr: Range<usize>,
    pub ur: Range<usize>,
    pub br: Range<usize>,
    pub wn: Range<usize>,
    pub un: Range<usize>,
    pub bn: Range<usize>,
    pub mu_w: Range<usize>,
    pub mu_b: Range<usize>,
    pub lv_w: Range<usize>,
    pub lv_b: Range<usize>,
    pub emb: Range<usize>,
    pub dec_w: Range<usize>,
    pub dec_p: Range<usize>,
    pub dec_b: Range<usize>,
    pub out_t_w: Range<usize>,
    pub out_t_b: Range<usize>,
    pub out_s_w: Range<usize>,
    pub out_s_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(temporal_dim: usize, spatial_dim: usize, hidden: usize, latent: usize, k: usize) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (h, l) = (hidden, latent);
        let t_w = take(h * temporal_dim);
        let t_b = take(h);
        let s_w = take(h * spatial_dim);
        let s_b = take(h);
        let f_w = take(h * 2 * h);
        let f_b = take(h);
        let wz = take(h * h);
        let uz = take(h * h);
        let bz = take(h);
        let wr = take(h * h);
        let ur = take(h * h);
        let br = take(h);
        let wn = take(h * h);
        let un = take(h * h);
        let bn = take(h);
        let mu_w = take(l * h);
        let mu_b = take(l);
        let lv_w = take(l * h);
        let lv_b = take(l);
        let emb = take(k * l);
        let dec_w = take(h * l);
        let dec_p = take(h * POSITION_DIM);
        let dec_b = take(h);
        let out_t_w = take(temporal_dim * h);
        let out_t_b = take(temporal_dim);
        let out_s_w = take(spatial_dim * h);
        let out_s_b = take(spatial_dim);
        Self {
            temporal_dim,
            spatial_dim,
            hidden,
            latent,
            k,
            t_w,
            t_b,
            s_w,
            s_b,
            f_w,
            f_b,
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wn,
            un,
            bn,
            mu_w,
            mu_b,
            lv_w,
            lv_b,
            emb,
            dec_w,
            dec_p,
            dec_b,
            out_t_w,
            out_t_b,
            out_s_w,
            out_s_b,
            total: at,
        }
    }

    /// Named tensors in storage order with their `(rows, cols)` shapes.
    pub fn groups(&self) -> Vec<(&'static str, Range<usize>, (usize, usize))> {
        let (h, l, k, dt, ds) = (self.hidden, self.latent, self.k, self.temporal_dim, self.spatial_dim);
        vec![
            ("temporal_proj.weight", self.t_w.clone(), (h, dt)),
            ("temporal_proj.bias", self.t_b.clone(), (h, 1)),
            ("spatial_proj.weight", self.s_w.clone(), (h, ds)),
            ("spatial_proj.bias", self.s_b.clone(), (h, 1)),
            ("fusion.weight", self.f_w.clone(), (h, 2 * h)),
            ("fusion.bias", self.f_b.clone(), (h, 1)),
            ("gru.w_update", self.wz.clone(), (h, h)),
            ("gru.u_update", self.uz.clone(), (h, h)),
            ("gru.b_update", self.bz.clone(), (h, 1)),
            ("gru.w_reset", self.wr.clone(), (h, h)),
            ("gru.u_reset", self.ur.clone(), (h, h)),
            ("gru.b_reset", self.br.clone(), (h, 1)),
            ("gru.w_cand", self.wn.clone(), (h, h)),
            ("gru.u_cand", self.un.clone(), (h, h)),
            ("gru.b_cand", self.bn.clone(), (h, 1)),
            ("head.mean.weight", self.mu_w.clone(), (l, h)),
            ("head.mean.bias", self.mu_b.clone(), (l, 1)),
            ("head.logvar.weight", self.lv_w.clone(), (l, h)),
            ("head.logvar.bias", self.lv_b.clone(), (l, 1)),
            ("cluster_embedding", self.emb.clone(), (k, l)),
            ("decoder.latent.weight", self.dec_w.clone(), (h, l)),
            ("decoder.position.weight", self.dec_p.clone(), (h, POSITION_DIM)),
            ("decoder.bias", self.dec_b.clone(), (h, 1)),
            ("decoder.temporal.weight", self.out_t_w.clone(), (dt, h)),
            ("decoder.temporal.bias", self.out_t_b.clone(), (dt, 1)),
            ("decoder.spatial.weight", self.out_s_w.clone(), (ds, h)),
            ("decoder.spatial.bias", self.out_s_b.clone(), (ds, 1)),
        ]
    }
}

/// Per-staypoint features of one trip, row-major `len x dim` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TripFeatures {
    pub temporal: Vec<f64>,
    pub spatial: Vec<f64>,
    pub len: usize,
}

impl TripFeatures {
    pub fn new(temporal: Vec<f64>, spatial: Vec<f64>, len: usize) -> Self {
        Self { temporal, spatial, len }
    }

    pub fn temporal_at(&self, t: usize) -> &[f64] {
        let d = self.temporal.len() / self.len;
        &self.temporal[t * d..(t + 1) * d]
    }

    pub fn spatial_at(&self, t: usize) -> &[f64] {
        let d = self.spatial.len() / self.len;
        &self.spatial[t * d..(t + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z_mean: Vec<f64>,
    pub z_logvar: Vec<f64>,
    pub gamma: Vec<f64>,
    pub cluster_id: usize,
    pub z_c: Vec<f64>,
    pub z_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl ClusterModel {
    /// Glorot-uniform weights, zero biases, small random embeddings.
    pub fn init(config: ModelConfig, temporal_dim: usize, spatial_dim: usize) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(temporal_dim, spatial_dim, config.hidden, config.latent, config.k);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (name, range, (rows, cols)) in layout.groups() {
            if cols == 1 {
                continue;
            }
            let limit = if name == "cluster_embedding" { 0.5 } else { (6.0 / (rows + cols) as f64).sqrt() };
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
            for p in &mut params[range] {
                *p = dist.sample(&mut rng);
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn latent_dim(&self) -> usize {
        self.layout.latent
    }

    pub fn param(&self, range: &Range<usize>) -> &[f64] {
        &self.params[range.clone()]
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        let l = self.layout.latent;
        &self.params[self.layout.emb.start + k * l..self.layout.emb.start + (k + 1) * l]
    }

    fn check_block(&self, temporal: &[f64], spatial: &[f64]) -> Result<()> {
        if temporal.len() != self.layout.temporal_dim || spatial.len() != self.layout.spatial_dim {
            return Err(Error::InvalidInput(format!(
                "feature widths {}/{} do not match model {}/{}",
                temporal.len(),
                spatial.len(),
                self.layout.temporal_dim,
                self.layout.spatial_dim
            )));
        }
        if temporal.iter().chain(spatial).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("staypoint features".into()));
        }
        Ok(())
    }

    /// Fused hidden representation of one staypoint.
    pub fn fuse(&self, temporal: &[f64], spatial: &[f64]) -> Result<Vec<f64>> {
        self.check_block(temporal, spatial)?;
        let mut cache = loss::StepInputs::new(self.layout.hidden);
        Ok(loss::fuse_step(self, temporal, spatial, &mut cache))
    }

    /// Deterministic encoding of already-fused staypoint vectors.
    pub fn encode_fused(&self, fused: &[Vec<f64>]) -> Result<LatentState> {
        if fused.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty trip".into()));
        }
        if fused.iter().any(|f| f.len() != self.layout.hidden) {
            return Err(Error::InvalidInput("fused width does not match the hidden size".into()));
        }
        let h = loss::run_gru(self, fused.iter().map(|f| f.as_slice()));
        Ok(self.latent_from_hidden(&h))
    }

    /// Deterministic encoding of a trip: the latent mean is used, no sampling.
    pub fn encode(&self, trip: &TripFeatures) -> Result<LatentState> {
        if trip.len == 0 {
            return Err(Error::InvalidInput("cannot encode an empty trip".into()));
        }
        let mut fused = Vec::with_capacity(trip.len);
        for t in 0..trip.len {
            fused.push(self.fuse(trip.temporal_at(t), trip.spatial_at(t))?);
        }
        self.encode_fused(&fused)
    }

    fn latent_from_hidden(&self, h: &[f64]) -> LatentState {
        let lay = &self.layout;
        let mut z_mean = vec![0.0; lay.latent];
        let mut z_logvar = vec![0.0; lay.latent];
        nn::affine(self.param(&lay.mu_w), self.param(&lay.mu_b), h, &mut z_mean);
        nn::affine(self.param(&lay.lv_w), self.param(&lay.lv_b), h, &mut z_logvar);
        let gamma = self.responsibilities(&z_mean);
        let cluster_id = nn::argmax(&gamma);
        let mut z_c = vec![0.0; lay.latent];
        for (k, g) in gamma.iter().enumerate() {
            nn::axpy(*g, self.embedding(k), &mut z_c);
        }
        let z_b = z_mean.iter().zip(&z_c).map(|(z, c)| z - c).collect();
        LatentState { z_mean, z_logvar, gamma, cluster_id, z_c, z_b }
    }

    /// Softmax over `-|z - e_k|^2 / temperature`.
    pub fn responsibilities(&self, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> =
            (0..self.k()).map(|k| -nn::sq_dist(z, self.embedding(k)) / self.config.temperature).collect();
        let mut gamma = vec![0.0; logits.len()];
        nn::softmax(&logits, &mut gamma);
        gamma
    }

    /// Reconstructs `length` staypoints as `(temporal, spatial)` rows.
    pub fn decode(&self, z: &[f64], length: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if length == 0 {
            return Err(Error::InvalidInput("decode length must be positive".into()));
        }
        if z.len() != self.layout.latent {
            return Err(Error::InvalidInput("latent width mismatch".into()));
        }
        let dec = loss::decode_forward(self, z, length);
        Ok((dec.temporal, dec.spatial))
    }

    pub fn encode_all(&self, trips: &[TripFeatures], exec: Execution) -> Result<Vec<LatentState>> {
        exec.map(trips, |t| self.encode(t)).into_iter().collect()
    }

    /// Reorders clusters: embedding row `perm[k]` becomes row `k`.
    pub fn permute_clusters(&mut self, perm: &[usize]) {
        let l = self.layout.latent;
        let old: Vec<f64> = self.params[self.layout.emb.clone()].to_vec();
        for (k, &src) in perm.iter().enumerate() {
            let dst = self.layout.emb.start + k * l;
            self.params[dst..dst + l].copy_from_slice(&old[src * l..(src + 1) * l]);
        }
    }
}

/// Training-period cluster centers in latent-mean space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenters {
    pub centers: Vec<Vec<f64>>,
    /// Training trips assigned to each cluster.
    pub support: Vec<usize>,
}

/// Mean latent mean per hard-assigned cluster; clusters that received no
/// trip fall back to their embedding row.
pub fn cluster_centers(model: &ClusterModel, states: &[LatentState]) -> ClusterCenters {
    let (k, l) = (model.k(), model.latent_dim());
    let mut sums = vec![vec![0.0; l]; k];
    let mut support = vec![0usize; k];
    for s in states {
        nn::axpy(1.0, &s.z_mean, &mut sums[s.cluster_id]);
        support[s.cluster_id] += 1;
    }
    let centers = sums
        .into_iter()
        .enumerate()
        .map(|(c, sum)| {
            if support[c] == 0 {
                model.embedding(c).to_vec()
            } else {
                sum.into_iter().map(|v| v / support[c] as f64).collect()
            }
        })
        .collect();
    ClusterCenters { centers, support }
}

#[cfg(test)]
mod tests;
