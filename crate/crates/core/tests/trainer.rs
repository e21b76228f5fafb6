mod common;

use std::collections::BTreeMap;
use std::fs;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamadapt::context::{MovingAverageBank, DET_JITTER};
use teamadapt::qmix::mix_with_weights;
use teamadapt::tape::Tape;
use teamadapt::trainer::{
    compute_losses, latest_checkpoint, rollout_episode, run_training, Ablation, BatchNoise, Checkpoint, EpisodeBatch,
    Learner, ReplayBuffer, StepMetrics, TrainConfig, Trainer,
};

use common::{tiny_config, warm_trainer};

const LN_2PI: f64 = 1.8378770664093453;

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

fn one_hot(width: usize, k: Option<usize>) -> Vec<f64> {
    let mut v = vec![0.0; width];
    if let Some(k) = k {
        v[k] = 1.0;
    }
    v
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-step quantities of one episode under the live networks.
struct Unrolled {
    z: Vec<Vec<f64>>,
    /// `[agent][t]`
    e: Vec<Vec<Vec<f64>>>,
    e_sigma: Vec<Vec<Vec<f64>>>,
    feats: Vec<Vec<Vec<f64>>>,
    q_tot: Vec<f64>,
    targets: Vec<f64>,
}

fn vec_of(t: &Tape, v: teamadapt::tape::Var) -> Vec<f64> {
    t.value(v).iter().copied().collect()
}

/// Replays one episode step by step with batch size one.
fn unroll_episode(l: &Learner, ep: &EpisodeBatch, r: usize, noise: &BatchNoise, gamma: f64) -> Unrolled {
    let (n, a) = (l.n_agents, l.n_actions);
    let len = ep.len();
    let global_in = |t: usize| {
        let mut x = ep.states[t].clone();
        for k in 0..l.n_entities {
            x.extend(one_hot(a, if t > 0 { ep.joint_actions[t - 1][k] } else { None }));
        }
        x
    };
    let local_in = |t: usize, i: usize| {
        let mut x = ep.obs[t][i].clone();
        x.extend(one_hot(a, if t > 0 { Some(ep.actions[t - 1][i]) } else { None }));
        x
    };
    let base = |t: usize| {
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| l.agent.base_input(&ep.obs[t][i], if t > 0 { Some(ep.actions[t - 1][i]) } else { None }, i))
            .collect();
        Array2::from_shape_vec((n, rows.len() / n), rows).unwrap()
    };

    let mut out = Unrolled {
        z: vec![],
        e: vec![vec![]; n],
        e_sigma: vec![vec![]; n],
        feats: vec![vec![]; n],
        q_tot: vec![],
        targets: vec![],
    };

    // live networks with the batch's noise
    let s = &l.store;
    let mut tape = Tape::new();
    let mut hg = l.global_enc.gru.zeros(&mut tape, 1);
    let mut hl: Vec<_> = (0..n).map(|i| l.local_encs[i].gru.zeros(&mut tape, 1)).collect();
    let mut hq = l.agent.gru.zeros(&mut tape, n);
    for t in 0..len {
        let x = tape.constant(row(&global_in(t)));
        let (g, h2) = l.global_enc.step(&mut tape, s, x, hg);
        hg = h2;
        let (mu, sig) = (vec_of(&tape, g.mu), vec_of(&tape, g.sigma));
        let z: Vec<f64> = (0..mu.len()).map(|d| mu[d] + sig[d] * noise.z[t][[r, d]]).collect();
        let mut es = Vec::new();
        for i in 0..n {
            let x = tape.constant(row(&local_in(t, i)));
            let (g, h2) = l.local_encs[i].step(&mut tape, s, x, hl[i]);
            hl[i] = h2;
            let (mu, sig) = (vec_of(&tape, g.mu), vec_of(&tape, g.sigma));
            let e: Vec<f64> = (0..mu.len()).map(|d| mu[d] + sig[d] * noise.e[i][t][[r, d]]).collect();
            out.feats[i].push(vec_of(&tape, h2));
            out.e_sigma[i].push(sig);
            es.extend(e.iter().copied());
            out.e[i].push(e);
        }
        let b = tape.constant(base(t));
        let ev = tape.constant(Array2::from_shape_vec((n, es.len() / n), es).unwrap());
        let (q, h2) = l.agent.forward(&mut tape, s, b, ev, hq);
        hq = h2;
        let qv = tape.value(q).clone();
        let chosen: Vec<f64> = (0..n).map(|i| qv[[i, ep.actions[t][i]]]).collect();
        let mut cond = ep.states[t].clone();
        cond.extend(&z);
        let (w1, b1, w2, b2) = l.mixer.weights(s, &cond);
        out.q_tot.push(mix_with_weights(&chosen, &w1, &b1, &w2, b2).unwrap());
        out.z.push(z);
    }

    // target networks on context means
    let s = &l.target.store;
    let mut tape = Tape::new();
    let mut hg = l.global_enc.gru.zeros(&mut tape, 1);
    let mut hl: Vec<_> = (0..n).map(|i| l.local_encs[i].gru.zeros(&mut tape, 1)).collect();
    let mut hq = l.agent.gru.zeros(&mut tape, n);
    let mut next = vec![0.0; len];
    for t in 0..=len {
        let x = tape.constant(row(&global_in(t)));
        let (g, h2) = l.global_enc.step(&mut tape, s, x, hg);
        hg = h2;
        let zmu = vec_of(&tape, g.mu);
        let mut es = Vec::new();
        for i in 0..n {
            let x = tape.constant(row(&local_in(t, i)));
            let (g, h2) = l.local_encs[i].step(&mut tape, s, x, hl[i]);
            hl[i] = h2;
            es.extend(vec_of(&tape, g.mu));
        }
        let b = tape.constant(base(t));
        let ev = tape.constant(Array2::from_shape_vec((n, es.len() / n), es).unwrap());
        let (q, h2) = l.agent.forward(&mut tape, s, b, ev, hq);
        hq = h2;
        if t == 0 {
            continue;
        }
        let qv = tape.value(q).clone();
        let best: Vec<f64> = (0..n).map(|i| qv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut cond = ep.states[t].clone();
        cond.extend(&zmu);
        let (w1, b1, w2, b2) = l.mixer.weights(s, &cond);
        next[t - 1] = mix_with_weights(&best, &w1, &b1, &w2, b2).unwrap();
    }
    out.targets = (0..len).map(|t| ep.rewards[t] + if ep.dones[t] { 0.0 } else { gamma * next[t] }).collect();
    out
}

/// Pull toward refreshed bars minus the jittered log-determinant.
fn consistency(
    groups: &BTreeMap<usize, Vec<Vec<f64>>>,
    old: &BTreeMap<usize, Vec<f64>>,
    clusters: &[usize],
    eta: f64,
    kappa: f64,
    d: usize,
) -> f64 {
    let mut bars: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut pull = 0.0;
    for (c, xs) in groups {
        let prev = old.get(c).cloned().unwrap_or_else(|| vec![0.0; d]);
        let bar: Vec<f64> =
            (0..d).map(|k| eta * prev[k] + (1.0 - eta) * xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64).collect();
        pull += xs.iter().map(|x| dist2(x, &bar)).sum::<f64>() / xs.len() as f64;
        bars.insert(*c, bar);
    }
    let mut all: Vec<usize> = clusters.iter().chain(groups.keys()).copied().collect();
    all.sort_unstable();
    all.dedup();
    let b: Vec<Vec<f64>> =
        all.iter().map(|c| bars.get(c).or(old.get(c)).cloned().unwrap_or_else(|| vec![0.0; d])).collect();
    let m = b.len();
    let r = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 + DET_JITTER } else { (-kappa * dist2(&b[i], &b[j])).exp() });
    pull - r.determinant().ln()
}

struct Components {
    td: f64,
    gce: f64,
    lce: f64,
    mi: f64,
    rec: f64,
}

fn oracle(
    l: &Learner,
    batch: &[&EpisodeBatch],
    bank: &MovingAverageBank,
    clusters: &[usize],
    cfg: &TrainConfig,
    noise: &BatchNoise,
) -> Components {
    let n = l.n_agents;
    let eps: Vec<Unrolled> =
        batch.iter().enumerate().map(|(r, ep)| unroll_episode(l, ep, r, noise, cfg.env.gamma)).collect();

    let mut sq = 0.0;
    let mut rows = 0;
    for u in &eps {
        for (q, y) in u.q_tot.iter().zip(&u.targets) {
            sq += (q - y).powi(2);
            rows += 1;
        }
    }
    let td = sq / rows as f64;

    // (episode, t) pairs per cluster
    let mut members: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (r, ep) in batch.iter().enumerate() {
        for t in 0..ep.len() {
            members.entry(ep.cluster_id.unwrap()).or_default().push((r, t));
        }
    }
    let (eta, kappa) = (cfg.context.eta, cfg.context.kappa);

    let zs: BTreeMap<usize, Vec<Vec<f64>>> =
        members.iter().map(|(c, m)| (*c, m.iter().map(|&(r, t)| eps[r].z[t].clone()).collect())).collect();
    let gce = consistency(&zs, &bank.z_bar, clusters, eta, kappa, cfg.context.z_dim);

    let mut lce = 0.0;
    let mut mi = 0.0;
    let mut rec = 0.0;
    for i in 0..n {
        let es: BTreeMap<usize, Vec<Vec<f64>>> =
            members.iter().map(|(c, m)| (*c, m.iter().map(|&(r, t)| eps[r].e[i][t].clone()).collect())).collect();
        let old: BTreeMap<usize, Vec<f64>> = bank.e_bar.iter().map(|(c, v)| (*c, v[i].clone())).collect();
        lce += consistency(&es, &old, clusters, eta, kappa, cfg.context.e_dim);

        for m in members.values() {
            let k = m.len();
            let mut tape = Tape::new();
            let z = tape.constant(Array2::from_shape_fn((k, cfg.context.z_dim), |(j, d)| eps[m[j].0].z[m[j].1][d]));
            let f = tape.constant(Array2::from_shape_fn((k, cfg.context.hidden), |(j, d)| eps[m[j].0].feats[i][m[j].1][d]));
            let q = l.var_heads[i].forward(&mut tape, &l.store, z, f);
            let (qmu, qsig) = (tape.value(q.mu).clone(), tape.value(q.sigma).clone());
            let mut lq = 0.0;
            let mut h = 0.0;
            for (j, &(r, t)) in m.iter().enumerate() {
                let e = &eps[r].e[i][t];
                for d in 0..e.len() {
                    let s = qsig[[j, d]];
                    lq += -0.5 * ((e[d] - qmu[[j, d]]) / s).powi(2) - s.ln() - 0.5 * LN_2PI;
                    h += 0.5 * (1.0 + LN_2PI) + eps[r].e_sigma[i][t][d].ln();
                }
            }
            mi += -(lq + h) / k as f64;

            let ev = tape.constant(Array2::from_shape_fn((k, cfg.context.e_dim), |(j, d)| eps[m[j].0].e[i][m[j].1][d]));
            let (po, pl) = l.recons[i].forward(&mut tape, &l.store, ev);
            let (po, pl) = (tape.value(po).clone(), tape.value(pl).clone());
            let (od, na) = (l.obs_dim, l.n_actions);
            let mut total = 0.0;
            let mut present = 0.0;
            for (j, &(r, t)) in m.iter().enumerate() {
                let ep = batch[r];
                for s in 0..ep.teammate_mask[t].len() {
                    if !ep.teammate_mask[t][s] {
                        continue;
                    }
                    present += 1.0;
                    let obs = &ep.teammate_obs[t][s];
                    total += (0..od).map(|x| (po[[j, s * od + x]] - obs[x]).powi(2)).sum::<f64>() / od as f64;
                    let logits: Vec<f64> = (0..na).map(|x| pl[[j, s * na + x]]).collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    let target = ep.joint_actions[t][n + s].unwrap();
                    total -= logits[target] - lse;
                }
            }
            if present > 0.0 {
                rec += total / present;
            }
        }
    }
    Components { td, gce, lce, mi, rec }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn loss_components_match_independent_recomputation() {
    let mut cfg = tiny_config(3);
    cfg.pool.generation_interval = 50;
    let mut t = warm_trainer(cfg, 12);
    // a few updates so bars and targets are no longer at their initial values
    for _ in 0..6 {
        t.train_episode().unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut batch = t.replay.sample_stratified(6, &mut rng);
    batch.sort_by_key(|e| e.cluster_id);
    let t_max = batch.iter().map(|e| e.len()).max().unwrap();
    let noise = BatchNoise::draw(&t.learner, batch.len(), t_max, &mut rng);
    let clusters = t.cluster_ids();
    let mut tape = Tape::new();
    let (_, got) = compute_losses(&mut tape, &t.learner, &batch, &t.bank, &clusters, &t.config, &noise).unwrap();
    let want = oracle(&t.learner, &batch, &t.bank, &clusters, &t.config, &noise);
    assert!(close(got.td, want.td), "td {} vs {}", got.td, want.td);
    assert!(close(got.gce.unwrap(), want.gce), "gce {:?} vs {}", got.gce, want.gce);
    assert!(close(got.lce.unwrap(), want.lce), "lce {:?} vs {}", got.lce, want.lce);
    assert!(close(got.mi.unwrap(), want.mi), "mi {:?} vs {}", got.mi, want.mi);
    assert!(close(got.rec.unwrap(), want.rec), "rec {:?} vs {}", got.rec, want.rec);
    let w = t.config.effective_weights();
    let total = want.td + w.gce * want.gce + w.lce * want.lce + w.mi * want.mi + w.rec * want.rec;
    assert!(close(got.total, total), "total {} vs {total}", got.total);
}

#[test]
fn full_ablation_optimizes_td_only() {
    let mut cfg = tiny_config(4);
    cfg.trainer.ablation = Ablation::full();
    let t = warm_trainer(cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch = t.replay.sample_stratified(4, &mut rng);
    batch.sort_by_key(|e| e.cluster_id);
    let t_max = batch.iter().map(|e| e.len()).max().unwrap();
    let noise = BatchNoise::draw(&t.learner, batch.len(), t_max, &mut rng);
    let mut tape = Tape::new();
    let (total, b) = compute_losses(&mut tape, &t.learner, &batch, &t.bank, &t.cluster_ids(), &t.config, &noise).unwrap();
    assert_eq!(b.total, b.td);
    assert_eq!(tape.scalar(total), b.td);
    // every group is its own cluster when clustering is bypassed
    let clusters: Vec<_> = t.pool.groups.iter().map(|g| g.meta.cluster_id.unwrap()).collect();
    let mut dedup = clusters.clone();
    dedup.dedup();
    assert_eq!(clusters, dedup);
    assert_eq!(t.registry.clusters.len(), t.pool.len());
}

#[test]
fn metrics_records_carry_every_component() {
    let t = warm_trainer(tiny_config(5), 8);
    let line = t.metrics.last().expect("an update was logged");
    let rec: StepMetrics = serde_json::from_str(line).unwrap();
    assert_eq!(rec.kind, "update");
    assert!(rec.gce.is_some() && rec.mi.is_some() && rec.lce.is_some() && rec.rec.is_some());
    assert!(!rec.z_bar_norms.is_empty());
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    for key in ["td", "gce", "mi", "lce", "rec", "total", "grad_norm", "z_bar_norms", "epsilon", "env_steps"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn training_episodes_are_stationary_and_tagged() {
    let t = warm_trainer(tiny_config(6), 10);
    for ep in &t.replay.episodes {
        assert!(ep.len() <= t.config.env.horizon);
        assert!(ep.changes.iter().all(|c| !c));
        assert!(ep.active_groups.iter().all(|g| *g == ep.group_id));
        assert_eq!(ep.cluster_id, t.registry.cluster_of(ep.group_id));
    }
}

#[test]
fn greedy_rollout_is_reproducible() {
    let t = warm_trainer(tiny_config(7), 1);
    let gid = t.pool.groups[0].id();
    let c = t.registry.cluster_of(gid).unwrap();
    let run = || rollout_episode(&t.learner, &t.pool, gid, c, &t.config.env, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(run(), run());
    assert_eq!(run().cluster_id, Some(c));
}

#[test]
fn replay_is_fifo_and_bounded() {
    let t = warm_trainer(tiny_config(8), 3);
    let ep = t.replay.episodes[0].clone();
    let mut r = ReplayBuffer::new(3);
    for k in 0..4 {
        let mut e = ep.clone();
        e.group_id = 100 + k;
        r.push(e);
    }
    assert_eq!(r.len(), 3);
    assert!(r.episodes.iter().all(|e| e.group_id != 100));
}

#[test]
fn smoke_run_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(9);
    cfg.trainer.total_env_steps = 400;
    cfg.trainer.checkpoint_interval = 200;
    cfg.trainer.eval_interval = 200;
    cfg.trainer.eval_episodes = 2;
    let summary = run_training(cfg, dir.path(), None).unwrap();
    assert!(summary.env_steps >= 400);
    assert!(!summary.checkpoints.is_empty());
    assert!(latest_checkpoint(&dir.path().join("checkpoints")).is_some());
    let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"update\"")));
    assert!(log.lines().any(|l| l.contains("\"eval\"")));
    assert!(dir.path().join("pool").exists());
}

#[test]
fn cluster_count_never_decreases() {
    let mut cfg = tiny_config(10);
    cfg.pool.generation_interval = 60;
    cfg.pool.groups_per_iteration = 2;
    cfg.pool.max_groups = 8;
    let mut t = Trainer::new(cfg, None).unwrap();
    let mut last = 0;
    while t.env_steps < 600 {
        t.train_episode().unwrap();
        assert!(t.registry.clusters.len() >= last);
        last = t.registry.clusters.len();
    }
    assert!(t.pool.len() > 2);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let t = warm_trainer(tiny_config(11), 5);
    let path = dir.path().join("ckpt_0000000001.json");
    let ck = t.checkpoint();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.learner, ck.learner);
    assert_eq!(back.env_steps, ck.env_steps);
    assert_eq!(back.bank, ck.bank);

    let mut old = ck.clone();
    old.version = 999;
    let vpath = dir.path().join("old.json");
    fs::write(&vpath, serde_json::to_vec(&old).unwrap()).unwrap();
    assert!(Checkpoint::load(&vpath).is_err());

    let bad = dir.path().join("bad.json");
    let bytes = fs::read(&path).unwrap();
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let err = Checkpoint::load(&bad).unwrap_err().to_string();
    assert!(err.contains("bad.json"), "{err}");
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(12);
    cfg.trainer.total_env_steps = 250;
    let first = run_training(cfg.clone(), dir.path(), None).unwrap();
    let ckpt = latest_checkpoint(&dir.path().join("checkpoints")).unwrap();
    let mut t = Trainer::resume(&ckpt, dir.path().to_path_buf()).unwrap();
    assert_eq!(t.env_steps, first.env_steps);
    assert_eq!(t.learner.target.since_sync, 0);
    t.config.trainer.total_env_steps = 400;
    let second = t.run().unwrap();
    assert!(second.env_steps >= 400);
    assert!(second.updates > first.updates);
}
