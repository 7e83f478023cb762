use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::loss::loss_and_gradient;
use super::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DT: usize = 42;
const DS: usize = 39;

fn tiny_config() -> ModelConfig {
    ModelConfig { k: 3, hidden: 8, latent: 4, seed: 11, ..ModelConfig::default() }
}

fn random_trip(rng: &mut ChaCha8Rng, len: usize) -> TripFeatures {
    let temporal = (0..len * DT).map(|_| rng.random_range(0.0..1.0)).collect();
    let spatial = (0..len * DS).map(|_| rng.random_range(0.0..3.0)).collect();
    TripFeatures::new(temporal, spatial, len)
}

fn zero_group(model: &mut ClusterModel, range: std::ops::Range<usize>) {
    model.params[range].iter_mut().for_each(|p| *p = 0.0);
}

#[test]
fn fuse_with_zero_projections_depends_only_on_biases() {
    let mut model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let lay = model.layout.clone();
    zero_group(&mut model, lay.t_w.clone());
    zero_group(&mut model, lay.s_w.clone());
    for (i, v) in model.params[lay.t_b.clone()].iter_mut().enumerate() {
        *v = 0.1 * i as f64;
    }
    let a = model.fuse(&[0.0; DT], &[0.0; DS]).unwrap();
    let b = model.fuse(&[1.0; DT], &[5.0; DS]).unwrap();
    assert_eq!(a, b);
    // fused = tanh(W_f [b_t; b_s] + b_f)
    let mut cat = model.param(&lay.t_b).to_vec();
    cat.extend_from_slice(model.param(&lay.s_b));
    let wf = model.param(&lay.f_w);
    for (i, v) in a.iter().enumerate() {
        let pre: f64 = (0..16).map(|j| wf[i * 16 + j] * cat[j]).sum::<f64>() + model.param(&lay.f_b)[i];
        assert!((v - pre.tanh()).abs() < 1e-15);
    }
}

#[test]
fn fuse_is_deterministic_and_continuous() {
    let model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trip = random_trip(&mut rng, 1);
    let base = model.fuse(trip.temporal_at(0), trip.spatial_at(0)).unwrap();
    assert_eq!(base, model.fuse(trip.temporal_at(0), trip.spatial_at(0)).unwrap());
    let mut deltas = Vec::new();
    for eps in [1e-3, 1e-4, 1e-5] {
        let mut s = trip.spatial_at(0).to_vec();
        s[7] += eps;
        let moved = model.fuse(trip.temporal_at(0), &s).unwrap();
        let d = moved.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        deltas.push(d / eps);
    }
    // |delta fused| / eps settles to the directional derivative
    assert!(deltas[0] > 0.0);
    assert!((deltas[1] - deltas[2]).abs() < 1e-3 * deltas[2].max(1e-12) + 1e-9);
    assert!(model.fuse(&[f64::NAN; DT], &[0.0; DS]).is_err());
}

#[test]
fn encoding_contract() {
    let model = ClusterModel::init(ModelConfig { k: 6, ..tiny_config() }, DT, DS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in 1..6 {
        let trip = random_trip(&mut rng, len);
        let s = model.encode(&trip).unwrap();
        assert_eq!(s.gamma.len(), 6);
        assert!((s.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.gamma.iter().all(|g| *g >= 0.0));
        for i in 0..s.z_mean.len() {
            assert!((s.z_c[i] + s.z_b[i] - s.z_mean[i]).abs() <= 1e-15 * s.z_mean[i].abs().max(1.0) * 4.0);
        }
        assert_eq!(model.encode(&trip).unwrap(), s);
    }
    assert!(model.encode_fused(&[]).is_err());
}

#[test]
fn decode_contract() {
    let model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let z = vec![0.3, -0.2, 0.1, 1.0];
    let (t, s) = model.decode(&z, 5).unwrap();
    assert_eq!(t.len(), 5 * DT);
    assert_eq!(s.len(), 5 * DS);
    assert_eq!(model.decode(&z, 5).unwrap(), (t, s));
    assert!(model.decode(&z, 0).is_err());
}

#[test]
fn perfect_decoder_has_zero_reconstruction_loss() {
    let mut model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let lay = model.layout.clone();
    for r in [lay.out_t_w.clone(), lay.out_t_b.clone(), lay.out_s_w.clone(), lay.out_s_b.clone()] {
        zero_group(&mut model, r);
    }
    let trip = TripFeatures::new(vec![0.0; 3 * DT], vec![0.0; 3 * DS], 3);
    let loss = total_loss(&[trip], &model, 5).unwrap();
    assert_eq!(loss.recon, 0.0);
}

#[test]
fn uniform_responsibilities_give_minus_log_k() {
    // weight 1 reports the term itself rather than the sharpening default
    let mut model = ClusterModel::init(ModelConfig { k: 6, entropy_weight: 1.0, ..tiny_config() }, DT, DS).unwrap();
    let lay = model.layout.clone();
    zero_group(&mut model, lay.emb.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = vec![random_trip(&mut rng, 4), random_trip(&mut rng, 2)];
    let loss = total_loss(&batch, &model, 1).unwrap();
    assert!((loss.entropy + 6f64.ln()).abs() < 1e-12, "{}", loss.entropy);
}

/// Straight-line recomputation of the objective for a single trip, written
/// with explicit index loops over the named parameter tensors.
fn oracle_single_trip(model: &ClusterModel, trip: &TripFeatures, eps: &[f64]) -> f64 {
    let p = &model.params;
    let g: std::collections::HashMap<&str, (std::ops::Range<usize>, (usize, usize))> =
        model.layout.groups().into_iter().map(|(n, r, s)| (n, (r, s))).collect();
    let mv = |name: &str, bias: Option<&str>, x: &[f64]| -> Vec<f64> {
        let (r, (rows, cols)) = &g[name];
        assert_eq!(*cols, x.len());
        (0..*rows)
            .map(|i| {
                let mut s = bias.map(|b| p[g[b].0.start + i]).unwrap_or(0.0);
                for j in 0..*cols {
                    s += p[r.start + i * cols + j] * x[j];
                }
                s
            })
            .collect()
    };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let hd = model.layout.hidden;
    let mut h = vec![0.0; hd];
    for t in 0..trip.len {
        let mut cat = mv("temporal_proj.weight", Some("temporal_proj.bias"), trip.temporal_at(t));
        cat.extend(mv("spatial_proj.weight", Some("spatial_proj.bias"), trip.spatial_at(t)));
        let f: Vec<f64> = mv("fusion.weight", Some("fusion.bias"), &cat).into_iter().map(f64::tanh).collect();
        let wz = mv("gru.w_update", Some("gru.b_update"), &f);
        let uz = mv("gru.u_update", None, &h);
        let wr = mv("gru.w_reset", Some("gru.b_reset"), &f);
        let ur = mv("gru.u_reset", None, &h);
        let z: Vec<f64> = (0..hd).map(|i| sig(wz[i] + uz[i])).collect();
        let r: Vec<f64> = (0..hd).map(|i| sig(wr[i] + ur[i])).collect();
        let rh: Vec<f64> = (0..hd).map(|i| r[i] * h[i]).collect();
        let wn = mv("gru.w_cand", Some("gru.b_cand"), &f);
        let un = mv("gru.u_cand", None, &rh);
        h = (0..hd).map(|i| (1.0 - z[i]) * (wn[i] + un[i]).tanh() + z[i] * h[i]).collect();
    }
    let mu = mv("head.mean.weight", Some("head.mean.bias"), &h);
    let lv = mv("head.logvar.weight", Some("head.logvar.bias"), &h);
    let l = mu.len();
    let zs: Vec<f64> = (0..l).map(|i| mu[i] + (lv[i] / 2.0).exp() * eps[i]).collect();
    let k = model.k();
    let emb = |c: usize| &p[g["cluster_embedding"].0.start + c * l..g["cluster_embedding"].0.start + (c + 1) * l];
    let d2: Vec<f64> = (0..k).map(|c| (0..l).map(|i| (mu[i] - emb(c)[i]).powi(2)).sum()).collect();
    let w: Vec<f64> = d2.iter().map(|d| (-d / model.config.temperature).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let gamma: Vec<f64> = w.iter().map(|x| x / wsum).collect();
    let mut best = 0;
    for c in 1..k {
        if gamma[c] > gamma[best] {
            best = c;
        }
    }
    let len = trip.len;
    let mut sse_t = 0.0;
    let mut sse_s = 0.0;
    let zdec = mv("decoder.latent.weight", Some("decoder.bias"), &zs);
    for t in 0..len {
        let u = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
        let pos = [(std::f64::consts::PI * u).sin(), (std::f64::consts::PI * u).cos()];
        let pp = mv("decoder.position.weight", None, &pos);
        let d: Vec<f64> = (0..hd).map(|i| (zdec[i] + pp[i]).tanh()).collect();
        let yt = mv("decoder.temporal.weight", Some("decoder.temporal.bias"), &d);
        let ys = mv("decoder.spatial.weight", Some("decoder.spatial.bias"), &d);
        sse_t += yt.iter().zip(trip.temporal_at(t)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        sse_s += ys.iter().zip(trip.spatial_at(t)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let recon = 1.5 * sse_t / (len * DT) as f64 + 1.2 * sse_s / (len * DS) as f64;
    let kl: f64 = -0.5 * (0..l).map(|i| 1.0 + lv[i] - mu[i].powi(2) - lv[i].exp()).sum::<f64>();
    let ent: f64 = gamma.iter().map(|x| x * x.ln()).sum();
    let center: f64 = d2[best];
    recon + kl - ent + center
}

#[test]
fn single_trip_loss_matches_straight_line_oracle() {
    let model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trip = random_trip(&mut rng, 5);
    let seed = 77;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = super::loss::sample_noise(&mut noise_rng, 1, model.latent_dim());
    let expected = oracle_single_trip(&model, &trip, &eps[0]);
    let got = total_loss(&[trip], &model, seed).unwrap();
    assert!((got.total - expected).abs() < 1e-12 * expected.abs().max(1.0), "{} vs {expected}", got.total);
}

#[test]
fn reconstruction_loss_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = vec![random_trip(&mut rng, 3), random_trip(&mut rng, 6)];
    let full = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let mut only_t = full.clone();
    only_t.config.alpha = 1.0;
    only_t.config.beta = 0.0;
    let mut only_s = full.clone();
    only_s.config.alpha = 0.0;
    only_s.config.beta = 1.0;
    let a = total_loss(&batch, &only_t, 9).unwrap().recon;
    let b = total_loss(&batch, &only_s, 9).unwrap().recon;
    assert_eq!(1.5 * a + 1.2 * b, total_loss(&batch, &full, 9).unwrap().recon);
}

/// Central differences on every parameter of a tiny model.
pub(crate) fn gradient_check(model: &ClusterModel, batch: &[TripFeatures], seed: u64) -> Vec<(usize, f64, f64, f64)> {
    let (_, analytic) = loss_and_gradient(batch, model, seed, true, Execution::Sequential).unwrap();
    let step = 1e-4;
    let mut probe = model.clone();
    (0..model.params.len())
        .map(|i| {
            let orig = probe.params[i];
            probe.params[i] = orig + step;
            let up = total_loss(batch, &probe, seed).unwrap().total;
            probe.params[i] = orig - step;
            let down = total_loss(batch, &probe, seed).unwrap().total;
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-7);
            (i, analytic[i], numeric, rel)
        })
        .collect()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = vec![random_trip(&mut rng, 4), random_trip(&mut rng, 3)];
    let report = gradient_check(&model, &batch, 21);
    let worst = report.iter().cloned().fold((0, 0.0, 0.0, 0.0), |a, b| if b.3 > a.3 { b } else { a });
    let good = report.iter().filter(|r| r.3 < 1e-3).count();
    assert!(worst.3 < 1e-2, "worst {worst:?}");
    assert!(good as f64 >= 0.95 * report.len() as f64);
}

#[test]
fn ablated_gradient_matches_finite_differences() {
    let mut cfg = tiny_config();
    cfg.use_spatial = false;
    let model = ClusterModel::init(cfg, DT, DS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = vec![random_trip(&mut rng, 2), random_trip(&mut rng, 5)];
    let report = gradient_check(&model, &batch, 3);
    assert!(report.iter().all(|r| r.3 < 1e-2));
    // the disabled block's projection never receives gradient
    let lay = &model.layout;
    let (_, g) = loss_and_gradient(&batch, &model, 3, true, Execution::default()).unwrap();
    assert!(g[lay.s_w.clone()].iter().all(|v| *v == 0.0));
}

/// Two archetypes: morning trips near one spatial profile, evening trips
/// near another.
fn two_archetypes(n: usize, seed: u64) -> (Vec<TripFeatures>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trips = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let arch = i % 2;
        let len = rng.random_range(4..7);
        let mut temporal = vec![0.0; len * DT];
        let mut spatial = vec![0.0; len * DS];
        for t in 0..len {
            let hour = if arch == 0 { 7 + t % 3 } else { 19 + t % 3 };
            temporal[t * DT + hour] = 1.0;
            let angle = std::f64::consts::TAU * hour as f64 / 24.0;
            temporal[t * DT + 38] = angle.sin();
            temporal[t * DT + 39] = angle.cos();
            for c in 0..DS {
                let base = if (c % 13 < 6) == (arch == 0) { 2.5 } else { 0.3 };
                spatial[t * DS + c] = base + rng.random_range(-0.3..0.3);
            }
        }
        trips.push(TripFeatures::new(temporal, spatial, len));
        labels.push(arch);
    }
    (trips, labels)
}

fn train_small(trips: &[TripFeatures], seed: u64) -> TrainOutcome {
    let cfg = ModelConfig { k: 2, hidden: 16, latent: 4, pretrain_epochs: 5, epochs: 15, batch_size: 16, learning_rate: 5e-3, seed, ..ModelConfig::default() };
    train(trips, &cfg, DT, DS, Execution::default()).unwrap()
}

#[test]
fn training_recovers_two_archetypes() {
    let (trips, labels) = two_archetypes(120, 8);
    let out = train_small(&trips, 1);
    assert!(out.diverged.is_none());
    let states = out.model.encode_all(&trips, Execution::default()).unwrap();
    let agree = states.iter().zip(&labels).filter(|(s, l)| s.cluster_id == **l).count();
    let best = agree.max(labels.len() - agree) as f64 / labels.len() as f64;
    assert!(best >= 0.95, "agreement {best}");
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (trips, _) = two_archetypes(60, 9);
    let a = train_small(&trips, 4);
    let b = train_small(&trips, 4);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    let seq = train(
        &trips,
        &a.model.config,
        DT,
        DS,
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(seq.model.params, a.model.params);

    let init = ClusterModel::init(a.model.config.clone(), DT, DS).unwrap();
    let before = total_loss(&trips, &init, 0).unwrap().total;
    let after = total_loss(&trips, &a.model, 0).unwrap().total;
    assert!(after < before, "{after} !< {before}");

    // decoding a latent mean of the trained model reconstructs better than
    // the untrained model does
    let trip = &trips[0];
    let mse = |m: &ClusterModel| {
        let z = m.encode(trip).unwrap().z_mean;
        let (t, s) = m.decode(&z, trip.len).unwrap();
        let e: f64 = t.iter().zip(&trip.temporal).chain(s.iter().zip(&trip.spatial)).map(|(a, b)| (a - b).powi(2)).sum();
        e / (t.len() + s.len()) as f64
    };
    assert!(mse(&a.model) < mse(&init));
}

#[test]
fn training_needs_k_trips() {
    let (trips, _) = two_archetypes(1, 1);
    let cfg = ModelConfig { k: 2, ..tiny_config() };
    assert!(train(&trips, &cfg, DT, DS, Execution::Sequential).is_err());
}

fn state(z: Vec<f64>, cluster_id: usize) -> LatentState {
    LatentState { z_logvar: vec![0.0; z.len()], gamma: vec![], cluster_id, z_c: vec![], z_b: vec![], z_mean: z }
}

#[test]
fn centers_average_members_and_fall_back_to_embeddings() {
    let model = ClusterModel::init(ModelConfig { k: 6, ..tiny_config() }, DT, DS).unwrap();
    let v = vec![1.0, 2.0, 3.0, 4.0];
    let c = cluster_centers(&model, &[state(v.clone(), 0), state(v.clone(), 0)]);
    assert_eq!(c.centers[0], v);
    let c = cluster_centers(&model, &[state(vec![0.0, 2.0, 4.0, 6.0], 1), state(vec![2.0, 2.0, 0.0, -6.0], 1)]);
    assert_eq!(c.centers[1], vec![1.0, 2.0, 2.0, 0.0]);
    assert_eq!(c.centers[5], model.embedding(5).to_vec());
    assert_eq!(c.support, vec![0, 2, 0, 0, 0, 0]);
}

#[test]
fn checkpoint_reproduces_encodings() {
    let (trips, _) = two_archetypes(20, 3);
    let model = ClusterModel::init(tiny_config(), DT, DS).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, model);
    for t in &trips {
        assert_eq!(back.encode(t).unwrap(), model.encode(t).unwrap());
    }
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    assert!(read_checkpoint(&b"garbage"[..]).is_err());
}
