//! Forward pass, training objective and its analytic gradient.
//!
//! The objective over a batch of `B` trips with `N` staypoints in total:
//!
//! ```text
//! L = alpha * MSE(temporal) + beta * MSE(spatial)     per-element means
//!   + w_kl * mean_trips KL(N(mu, exp(logvar)) || N(0, I))
//!   + w_ent * mean_trips sum_k gamma_k ln gamma_k    negative entropy
//!   + mean_trips |mu - e_argmax(gamma)|^2             center loss
//! ```
//!
//! `w_kl` is the configured KL weight times the warm-up factor; `w_ent` is
//! the configured entropy weight. During pretraining the entropy and center
//! terms are switched off.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::nn::{self, affine, affine_acc, affine_backward, sigmoid};
use super::{ClusterModel, TripFeatures, POSITION_DIM};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Loss terms of one batch. `recon` already carries the alpha/beta weights;
/// the MSE fields are unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub mse_temporal: f64,
    pub mse_spatial: f64,
    pub kl: f64,
    pub entropy: f64,
    pub center: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.kl, self.entropy, self.center].iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} recon={:.6} (mse_t={:.6} mse_s={:.6}) kl={:.6} entropy={:.6} center={:.6}",
            self.total, self.recon, self.mse_temporal, self.mse_spatial, self.kl, self.entropy, self.center
        )
    }
}

pub(crate) struct StepInputs {
    pub cat: Vec<f64>,
}

impl StepInputs {
    pub fn new(hidden: usize) -> Self {
        Self { cat: vec![0.0; 2 * hidden] }
    }
}

/// Projects both blocks into `cache.cat` and returns the fused vector.
/// A disabled block contributes only its projection bias.
pub(crate) fn fuse_step(model: &ClusterModel, temporal: &[f64], spatial: &[f64], cache: &mut StepInputs) -> Vec<f64> {
    let lay = &model.layout;
    let h = lay.hidden;
    let p = &model.params;
    let (pt, ps) = cache.cat.split_at_mut(h);
    if model.config.use_temporal {
        affine(&p[lay.t_w.clone()], &p[lay.t_b.clone()], temporal, pt);
    } else {
        pt.copy_from_slice(&p[lay.t_b.clone()]);
    }
    if model.config.use_spatial {
        affine(&p[lay.s_w.clone()], &p[lay.s_b.clone()], spatial, ps);
    } else {
        ps.copy_from_slice(&p[lay.s_b.clone()]);
    }
    let mut f = vec![0.0; h];
    affine(&p[lay.f_w.clone()], &p[lay.f_b.clone()], &cache.cat, &mut f);
    f.iter_mut().for_each(|v| *v = v.tanh());
    f
}

struct GruStep {
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    n: Vec<f64>,
}

fn gru_step(model: &ClusterModel, f: &[f64], h_prev: &[f64], h_out: &mut [f64]) -> GruStep {
    let lay = &model.layout;
    let p = &model.params;
    let hd = lay.hidden;
    let mut z = vec![0.0; hd];
    let mut r = vec![0.0; hd];
    let mut n = vec![0.0; hd];
    affine(&p[lay.wz.clone()], &p[lay.bz.clone()], f, &mut z);
    affine_acc(&p[lay.uz.clone()], h_prev, &mut z);
    affine(&p[lay.wr.clone()], &p[lay.br.clone()], f, &mut r);
    affine_acc(&p[lay.ur.clone()], h_prev, &mut r);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    affine(&p[lay.wn.clone()], &p[lay.bn.clone()], f, &mut n);
    affine_acc(&p[lay.un.clone()], &rh, &mut n);
    n.iter_mut().for_each(|v| *v = v.tanh());
    for i in 0..hd {
        h_out[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];
    }
    GruStep { z, r, rh, n }
}

pub(crate) fn run_gru<'a>(model: &ClusterModel, fused: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let hd = model.layout.hidden;
    let mut h = vec![0.0; hd];
    let mut next = vec![0.0; hd];
    for f in fused {
        gru_step(model, f, &h, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    h
}

pub(crate) fn position_encoding(t: usize, len: usize) -> [f64; POSITION_DIM] {
    let u = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
    let (s, c) = (std::f64::consts::PI * u).sin_cos();
    [s, c]
}

pub(crate) struct DecodeOutput {
    pub hidden: Vec<f64>,
    pub temporal: Vec<f64>,
    pub spatial: Vec<f64>,
}

pub(crate) fn decode_forward(model: &ClusterModel, z: &[f64], len: usize) -> DecodeOutput {
    let lay = &model.layout;
    let p = &model.params;
    let (hd, dt, ds) = (lay.hidden, lay.temporal_dim, lay.spatial_dim);
    let mut base = vec![0.0; hd];
    affine(&p[lay.dec_w.clone()], &p[lay.dec_b.clone()], z, &mut base);
    let mut out = DecodeOutput { hidden: vec![0.0; len * hd], temporal: vec![0.0; len * dt], spatial: vec![0.0; len * ds] };
    for t in 0..len {
        let d = &mut out.hidden[t * hd..(t + 1) * hd];
        d.copy_from_slice(&base);
        affine_acc(&p[lay.dec_p.clone()], &position_encoding(t, len), d);
        d.iter_mut().for_each(|v| *v = v.tanh());
        affine(&p[lay.out_t_w.clone()], &p[lay.out_t_b.clone()], d, &mut out.temporal[t * dt..(t + 1) * dt]);
        affine(&p[lay.out_s_w.clone()], &p[lay.out_s_b.clone()], d, &mut out.spatial[t * ds..(t + 1) * ds]);
    }
    out
}

/// Per-trip sums before batch normalization.
#[derive(Clone, Copy, Debug, Default)]
struct TripTerms {
    sse_temporal: f64,
    sse_spatial: f64,
    kl: f64,
    entropy: f64,
    center: f64,
}

impl TripTerms {
    fn add(&mut self, o: &TripTerms) {
        self.sse_temporal += o.sse_temporal;
        self.sse_spatial += o.sse_spatial;
        self.kl += o.kl;
        self.entropy += o.entropy;
        self.center += o.center;
    }
}

/// Gradient scale factors of each term for one batch.
#[derive(Clone, Copy, Debug)]
struct Coefs {
    temporal: f64,
    spatial: f64,
    kl: f64,
    entropy: f64,
    center: f64,
}

/// Per-epoch multipliers on top of the configured term weights: the KL
/// warm-up factor, and a switch for the entropy and center terms that is
/// off while the autoencoder is pretrained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Schedule {
    pub kl: f64,
    pub clustering: f64,
}

impl Schedule {
    pub const FULL: Schedule = Schedule { kl: 1.0, clustering: 1.0 };
}

fn two<'a>(g: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Forward pass of one trip with sampled noise `eps`; when `grad` is given,
/// accumulates the gradient of the normalized batch objective into it.
fn trip_objective(
    model: &ClusterModel,
    trip: &TripFeatures,
    eps: &[f64],
    coefs: Coefs,
    grad: Option<&mut [f64]>,
) -> TripTerms {
    let lay = &model.layout;
    let p = &model.params;
    let (hd, l, k_n, dt, ds) = (lay.hidden, lay.latent, lay.k, lay.temporal_dim, lay.spatial_dim);
    let len = trip.len;

    // encoder
    let mut cats = Vec::with_capacity(len);
    let mut fs = Vec::with_capacity(len);
    let mut steps = Vec::with_capacity(len);
    let mut hs = vec![vec![0.0; hd]; len + 1];
    for t in 0..len {
        let mut inputs = StepInputs::new(hd);
        let f = fuse_step(model, trip.temporal_at(t), trip.spatial_at(t), &mut inputs);
        let (prev, rest) = hs.split_at_mut(t + 1);
        steps.push(gru_step(model, &f, &prev[t], &mut rest[0]));
        cats.push(inputs.cat);
        fs.push(f);
    }
    let h_last = &hs[len];
    let mut mu = vec![0.0; l];
    let mut lv = vec![0.0; l];
    affine(&p[lay.mu_w.clone()], &p[lay.mu_b.clone()], h_last, &mut mu);
    affine(&p[lay.lv_w.clone()], &p[lay.lv_b.clone()], h_last, &mut lv);
    let sigma: Vec<f64> = lv.iter().map(|v| (0.5 * v).exp()).collect();
    let z: Vec<f64> = (0..l).map(|i| mu[i] + sigma[i] * eps[i]).collect();

    let gamma = model.responsibilities(&mu);
    let c = nn::argmax(&gamma);

    let dec = decode_forward(model, &z, len);

    let mut terms = TripTerms::default();
    for t in 0..len {
        terms.sse_temporal += nn::sq_dist(&dec.temporal[t * dt..(t + 1) * dt], trip.temporal_at(t));
        terms.sse_spatial += nn::sq_dist(&dec.spatial[t * ds..(t + 1) * ds], trip.spatial_at(t));
    }
    terms.kl = -0.5 * (0..l).map(|i| 1.0 + lv[i] - mu[i] * mu[i] - lv[i].exp()).sum::<f64>();
    let neg_entropy: f64 = gamma.iter().map(|&g| if g > 0.0 { g * g.ln() } else { 0.0 }).sum();
    terms.entropy = neg_entropy;
    terms.center = nn::sq_dist(&mu, model.embedding(c));

    let Some(g) = grad else {
        return terms;
    };

    // decoder
    let mut dbase = vec![0.0; hd];
    let mut dd = vec![0.0; hd];
    for t in 0..len {
        let d = &dec.hidden[t * hd..(t + 1) * hd];
        let dyt: Vec<f64> = dec.temporal[t * dt..(t + 1) * dt]
            .iter()
            .zip(trip.temporal_at(t))
            .map(|(y, x)| coefs.temporal * (y - x))
            .collect();
        let dys: Vec<f64> = dec.spatial[t * ds..(t + 1) * ds]
            .iter()
            .zip(trip.spatial_at(t))
            .map(|(y, x)| coefs.spatial * (y - x))
            .collect();
        dd.iter_mut().for_each(|v| *v = 0.0);
        let (gw, gb) = two(g, &lay.out_t_w, &lay.out_t_b);
        affine_backward(&p[lay.out_t_w.clone()], d, &dyt, gw, Some(gb), Some(&mut dd));
        let (gw, gb) = two(g, &lay.out_s_w, &lay.out_s_b);
        affine_backward(&p[lay.out_s_w.clone()], d, &dys, gw, Some(gb), Some(&mut dd));
        let dpre: Vec<f64> = dd.iter().zip(d).map(|(g, v)| g * (1.0 - v * v)).collect();
        let pos = position_encoding(t, len);
        affine_backward(&p[lay.dec_p.clone()], &pos, &dpre, &mut g[lay.dec_p.clone()], None, None);
        nn::axpy(1.0, &dpre, &mut dbase);
    }
    let mut dz = vec![0.0; l];
    {
        let (gw, gb) = two(g, &lay.dec_w, &lay.dec_b);
        affine_backward(&p[lay.dec_w.clone()], &z, &dbase, gw, Some(gb), Some(&mut dz));
    }

    // latent
    let mut dmu = dz.clone();
    let mut dlv: Vec<f64> = (0..l).map(|i| dz[i] * eps[i] * 0.5 * sigma[i]).collect();
    for i in 0..l {
        dmu[i] += coefs.kl * mu[i];
        dlv[i] += coefs.kl * 0.5 * (lv[i].exp() - 1.0);
    }
    let tau = model.config.temperature;
    let emb = lay.emb.start;
    for k in 0..k_n {
        let gk = gamma[k];
        let dlogit = coefs.entropy * gk * (if gk > 0.0 { gk.ln() } else { 0.0 } - neg_entropy);
        let ddist = -dlogit / tau;
        if ddist == 0.0 {
            continue;
        }
        for i in 0..l {
            let diff = mu[i] - p[emb + k * l + i];
            dmu[i] += 2.0 * ddist * diff;
            g[emb + k * l + i] -= 2.0 * ddist * diff;
        }
    }
    for i in 0..l {
        let diff = mu[i] - p[emb + c * l + i];
        dmu[i] += 2.0 * coefs.center * diff;
        g[emb + c * l + i] -= 2.0 * coefs.center * diff;
    }
    let mut dh = vec![0.0; hd];
    {
        let (gw, gb) = two(g, &lay.mu_w, &lay.mu_b);
        affine_backward(&p[lay.mu_w.clone()], h_last, &dmu, gw, Some(gb), Some(&mut dh));
        let (gw, gb) = two(g, &lay.lv_w, &lay.lv_b);
        affine_backward(&p[lay.lv_w.clone()], h_last, &dlv, gw, Some(gb), Some(&mut dh));
    }

    // recurrent encoder, back through time
    for t in (0..len).rev() {
        let st = &steps[t];
        let h_prev = &hs[t];
        let f = &fs[t];
        let mut dhp: Vec<f64> = dh.iter().zip(&st.z).map(|(a, z)| a * z).collect();
        let dan: Vec<f64> = (0..hd).map(|i| dh[i] * (1.0 - st.z[i]) * (1.0 - st.n[i] * st.n[i])).collect();
        let daz: Vec<f64> =
            (0..hd).map(|i| dh[i] * (h_prev[i] - st.n[i]) * st.z[i] * (1.0 - st.z[i])).collect();
        let mut df = vec![0.0; hd];
        let mut drh = vec![0.0; hd];
        let (gw, gb) = two(g, &lay.wn, &lay.bn);
        affine_backward(&p[lay.wn.clone()], f, &dan, gw, Some(gb), Some(&mut df));
        affine_backward(&p[lay.un.clone()], &st.rh, &dan, &mut g[lay.un.clone()], None, Some(&mut drh));
        let dar: Vec<f64> = (0..hd).map(|i| drh[i] * h_prev[i] * st.r[i] * (1.0 - st.r[i])).collect();
        for i in 0..hd {
            dhp[i] += drh[i] * st.r[i];
        }
        let (gw, gb) = two(g, &lay.wz, &lay.bz);
        affine_backward(&p[lay.wz.clone()], f, &daz, gw, Some(gb), Some(&mut df));
        affine_backward(&p[lay.uz.clone()], h_prev, &daz, &mut g[lay.uz.clone()], None, Some(&mut dhp));
        let (gw, gb) = two(g, &lay.wr, &lay.br);
        affine_backward(&p[lay.wr.clone()], f, &dar, gw, Some(gb), Some(&mut df));
        affine_backward(&p[lay.ur.clone()], h_prev, &dar, &mut g[lay.ur.clone()], None, Some(&mut dhp));

        let da: Vec<f64> = df.iter().zip(f).map(|(d, v)| d * (1.0 - v * v)).collect();
        let mut dcat = vec![0.0; 2 * hd];
        let (gw, gb) = two(g, &lay.f_w, &lay.f_b);
        affine_backward(&p[lay.f_w.clone()], &cats[t], &da, gw, Some(gb), Some(&mut dcat));
        let (dpt, dps) = dcat.split_at(hd);
        if model.config.use_temporal {
            let (gw, gb) = two(g, &lay.t_w, &lay.t_b);
            affine_backward(&p[lay.t_w.clone()], trip.temporal_at(t), dpt, gw, Some(gb), None);
        } else {
            nn::axpy(1.0, dpt, &mut g[lay.t_b.clone()]);
        }
        if model.config.use_spatial {
            let (gw, gb) = two(g, &lay.s_w, &lay.s_b);
            affine_backward(&p[lay.s_w.clone()], trip.spatial_at(t), dps, gw, Some(gb), None);
        } else {
            nn::axpy(1.0, dps, &mut g[lay.s_b.clone()]);
        }
        dh = dhp;
    }
    terms
}

/// Trips per gradient partial; partials are summed in order.
pub(crate) const GRAD_CHUNK: usize = 4;

/// Evaluates the batch objective with explicit noise, optionally writing the
/// gradient into `grad` (overwritten).
pub(crate) fn batch_objective(
    model: &ClusterModel,
    batch: &[&TripFeatures],
    eps: &[Vec<f64>],
    schedule: Schedule,
    grad: Option<&mut Vec<f64>>,
    exec: Execution,
) -> LossBreakdown {
    let lay = &model.layout;
    let b = batch.len() as f64;
    let n_steps: usize = batch.iter().map(|t| t.len).sum();
    let (alpha, beta) = model.config.recon_weights();
    let coefs = Coefs {
        temporal: 2.0 * alpha / (n_steps * lay.temporal_dim) as f64,
        spatial: 2.0 * beta / (n_steps * lay.spatial_dim) as f64,
        kl: schedule.kl * model.config.kl_weight / b,
        entropy: schedule.clustering * model.config.entropy_weight / b,
        center: schedule.clustering / b,
    };
    let items: Vec<(&TripFeatures, &[f64])> = batch.iter().copied().zip(eps.iter().map(Vec::as_slice)).collect();
    let want_grad = grad.is_some();
    let partials = exec.map_chunks(&items, GRAD_CHUNK, |chunk| {
        let mut g = if want_grad { vec![0.0; lay.total] } else { Vec::new() };
        let mut terms = TripTerms::default();
        for (trip, e) in chunk {
            let t = trip_objective(model, trip, e, coefs, want_grad.then_some(g.as_mut_slice()));
            terms.add(&t);
        }
        (terms, g)
    });
    let mut terms = TripTerms::default();
    if let Some(grad) = grad {
        grad.clear();
        grad.resize(lay.total, 0.0);
        for (t, g) in &partials {
            terms.add(t);
            nn::axpy(1.0, g, grad);
        }
    } else {
        partials.iter().for_each(|(t, _)| terms.add(t));
    }
    let mse_temporal = terms.sse_temporal / (n_steps * lay.temporal_dim) as f64;
    let mse_spatial = terms.sse_spatial / (n_steps * lay.spatial_dim) as f64;
    let recon = alpha * mse_temporal + beta * mse_spatial;
    let kl = schedule.kl * model.config.kl_weight * terms.kl / b;
    let entropy = schedule.clustering * model.config.entropy_weight * terms.entropy / b;
    let center = schedule.clustering * terms.center / b;
    LossBreakdown { total: recon + kl + entropy + center, recon, mse_temporal, mse_spatial, kl, entropy, center }
}

/// Standard-normal noise for each trip, drawn in batch order.
pub(crate) fn sample_noise(rng: &mut ChaCha8Rng, n: usize, latent: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..latent).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// Full objective on a batch with reparameterization noise drawn from
/// `seed`; the KL term carries weight 1.
pub fn total_loss(batch: &[TripFeatures], model: &ClusterModel, seed: u64) -> Result<LossBreakdown> {
    let (loss, _) = loss_and_gradient(batch, model, seed, false, Execution::Sequential)?;
    Ok(loss)
}

/// [`total_loss`] together with its gradient over the flat parameter vector.
pub fn loss_and_gradient(
    batch: &[TripFeatures],
    model: &ClusterModel,
    seed: u64,
    with_grad: bool,
    exec: Execution,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss needs a non-empty batch".into()));
    }
    if batch.iter().any(|t| t.len == 0) {
        return Err(Error::InvalidInput("batch contains an empty trip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = sample_noise(&mut rng, batch.len(), model.latent_dim());
    let refs: Vec<&TripFeatures> = batch.iter().collect();
    let mut grad = Vec::new();
    let loss = batch_objective(model, &refs, &eps, Schedule::FULL, with_grad.then_some(&mut grad), exec);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss ({loss})")));
    }
    Ok((loss, grad))
}
