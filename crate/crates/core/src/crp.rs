//! Behaviour clustering of teammate groups.
//!
//! A sequence encoder maps a trajectory to an embedding, a recurrent decoder
//! scores the observed joint actions given that embedding, and groups are
//! assigned to clusters under a Chinese-restaurant-process prior.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, GruCell, Linear, Mlp};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::teammates::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModelConfig {
    pub state_dim: usize,
    /// Controllable agents plus teammate slots.
    pub n_agents: usize,
    pub n_actions: usize,
    pub embed_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    /// Longest token sequence (`T + 1`) the positional table covers.
    pub max_len: usize,
    pub decoder_hidden: usize,
    pub lr: f64,
}

impl BehaviorModelConfig {
    pub fn new(state_dim: usize, n_agents: usize, n_actions: usize, horizon: usize) -> Self {
        Self {
            state_dim,
            n_agents,
            n_actions,
            embed_dim: 16,
            d_model: 32,
            n_layers: 2,
            max_len: horizon + 1,
            decoder_hidden: 16,
            lr: 1e-3,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.state_dim + self.n_agents * self.n_actions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttentionLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModel {
    pub config: BehaviorModelConfig,
    pub store: ParamStore,
    token_in: Linear,
    positions: ParamId,
    layers: Vec<AttentionLayer>,
    pool_out: Linear,
    dec_gru: GruCell,
    dec_head: Linear,
    pub opt: Adam,
}

impl BehaviorModel {
    pub fn new<R: Rng>(config: BehaviorModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let d = config.d_model;
        let token_in = Linear::new(&mut store, "crp.tok", config.token_dim(), d, rng);
        let positions = store.add(
            "crp.pos",
            Array2::from_shape_fn((config.max_len, d), |_| rng.random_range(-0.1..0.1)),
        );
        let layers = (0..config.n_layers)
            .map(|l| AttentionLayer {
                wq: Linear::new(&mut store, &format!("crp.l{l}.q"), d, d, rng),
                wk: Linear::new(&mut store, &format!("crp.l{l}.k"), d, d, rng),
                wv: Linear::new(&mut store, &format!("crp.l{l}.v"), d, d, rng),
                wo: Linear::new(&mut store, &format!("crp.l{l}.o"), d, d, rng),
                ff: Mlp::new(&mut store, &format!("crp.l{l}.ff"), &[d, 2 * d, d], Activation::Relu, rng),
            })
            .collect();
        let pool_out = Linear::new(&mut store, "crp.out", d, config.embed_dim, rng);
        let dec_gru = GruCell::new(&mut store, "crp.dec", config.state_dim, config.decoder_hidden, rng);
        let dec_head = Linear::new(
            &mut store,
            "crp.head",
            config.decoder_hidden + config.embed_dim,
            config.n_agents * config.n_actions,
            rng,
        );
        let opt = Adam::new(&store, config.lr, Some(10.0));
        Self { config, store, token_in, positions, layers, pool_out, dec_gru, dec_head, opt }
    }

    fn tokens(&self, traj: &Trajectory) -> Result<Array2<f64>> {
        let c = &self.config;
        let len = traj.states.len();
        if len > c.max_len {
            return Err(Error::TooLong { len, capacity: c.max_len });
        }
        if len == 0 {
            return Err(Error::Empty("trajectory"));
        }
        let mut x = Array2::zeros((len, c.token_dim()));
        for (t, s) in traj.states.iter().enumerate() {
            if s.len() != c.state_dim {
                return Err(Error::InvalidArgument(format!("state dim {} != {}", s.len(), c.state_dim)));
            }
            for (j, &v) in s.iter().enumerate() {
                x[[t, j]] = v;
            }
            if let Some(joint) = traj.joint_actions.get(t) {
                for (agent, a) in joint.iter().enumerate().take(c.n_agents) {
                    if let Some(a) = a {
                        x[[t, c.state_dim + agent * c.n_actions + a]] = 1.0;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Embedding of one trajectory on `tape`, `1×embed_dim`.
    pub fn encode(&self, tape: &mut Tape, traj: &Trajectory) -> Result<Var> {
        let tokens = self.tokens(traj)?;
        let len = tokens.nrows();
        let d = self.config.d_model;
        let x = tape.constant(tokens);
        let mut h = self.token_in.forward(tape, &self.store, x);
        let pos = tape.param(&self.store, self.positions);
        let pos = tape.slice_rows(pos, 0, len);
        h = tape.add(h, pos);
        for layer in &self.layers {
            let n = tape.layer_norm(h, 1e-5);
            let q = layer.wq.forward(tape, &self.store, n);
            let k = layer.wk.forward(tape, &self.store, n);
            let v = layer.wv.forward(tape, &self.store, n);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            let mixed = tape.matmul(attn, v);
            let o = layer.wo.forward(tape, &self.store, mixed);
            h = tape.add(h, o);
            let n = tape.layer_norm(h, 1e-5);
            let f = layer.ff.forward(tape, &self.store, n);
            h = tape.add(h, f);
        }
        let pooled = tape.mean_rows(h);
        Ok(self.pool_out.forward(tape, &self.store, pooled))
    }

    pub fn embed(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.encode(&mut tape, traj)?;
        Ok(tape.value(v).iter().copied().collect())
    }

    /// Log-likelihood of each trajectory's observed actions given one
    /// embedding row per trajectory (`embeddings` is `B×embed_dim`), `B×1`.
    pub fn log_likelihood(&self, tape: &mut Tape, trajs: &[&Trajectory], embeddings: Var) -> Result<Var> {
        let c = &self.config;
        let b = trajs.len();
        if b == 0 {
            return Err(Error::Empty("trajectory batch"));
        }
        let t_max = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut h = self.dec_gru.zeros(tape, b);
        let mut total = tape.constant(Array2::zeros((b, 1)));
        for t in 0..t_max {
            let s = Array2::from_shape_fn((b, c.state_dim), |(r, j)| {
                trajs[r].states.get(t).filter(|_| t < trajs[r].len()).map(|s| s[j]).unwrap_or(0.0)
            });
            let s = tape.constant(s);
            h = self.dec_gru.forward(tape, &self.store, s, h);
            // the embedding enters the logits linearly
            let feat = tape.concat_cols(&[h, embeddings]);
            let logits = self.dec_head.forward(tape, &self.store, feat);
            for agent in 0..c.n_agents {
                let mut idx = vec![0; b];
                let mut mask = Array2::zeros((b, 1));
                for (r, traj) in trajs.iter().enumerate() {
                    if let Some(Some(a)) = traj.joint_actions.get(t).and_then(|j| j.get(agent)) {
                        idx[r] = *a;
                        mask[[r, 0]] = 1.0;
                    }
                }
                if mask.sum() == 0.0 {
                    continue;
                }
                let block = tape.slice_cols(logits, agent * c.n_actions, c.n_actions);
                let lp = tape.log_softmax_rows(block);
                let picked = tape.gather(lp, &idx);
                let m = tape.constant(mask);
                let picked = tape.mul(picked, m);
                total = tape.add(total, picked);
            }
        }
        Ok(total)
    }

    /// Log-likelihood of `traj` under a fixed embedding.
    pub fn action_log_likelihood(&self, traj: &Trajectory, embedding: &[f64]) -> Result<f64> {
        if embedding.len() != self.config.embed_dim {
            return Err(Error::InvalidArgument("embedding dimension mismatch".into()));
        }
        let mut tape = Tape::new();
        let v = tape.constant(Array2::from_shape_vec((1, embedding.len()), embedding.to_vec()).expect("row"));
        let ll = self.log_likelihood(&mut tape, &[traj], v)?;
        Ok(tape.scalar(ll))
    }

    /// Mean log-likelihood of several trajectories under one embedding.
    pub fn mean_log_likelihood(&self, trajs: &[&Trajectory], embedding: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let row = Array2::from_shape_fn((trajs.len(), embedding.len()), |(_, j)| embedding[j]);
        let v = tape.constant(row);
        let ll = self.log_likelihood(&mut tape, trajs, v)?;
        Ok(tape.value(ll).mean().unwrap_or(0.0))
    }

    /// Negative mean log-likelihood with each trajectory decoded from its own
    /// embedding.
    pub fn model_loss(&self, tape: &mut Tape, trajs: &[&Trajectory]) -> Result<Var> {
        if trajs.is_empty() {
            return Err(Error::Empty("trajectory batch"));
        }
        let rows = trajs.iter().map(|t| self.encode(tape, t)).collect::<Result<Vec<_>>>()?;
        let emb = tape.concat_rows(&rows);
        let ll = self.log_likelihood(tape, trajs, emb)?;
        let m = tape.mean(ll);
        Ok(tape.neg(m))
    }

    /// One optimizer step on a minibatch; returns the loss before the step.
    pub fn train_step(&mut self, trajs: &[&Trajectory]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.model_loss(&mut tape, trajs)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("behaviour model loss".into()));
        }
        let grads = tape.backward(loss);
        self.opt.apply(&mut self.store, &grads);
        Ok(value)
    }

    /// Mean embedding over a group's trajectories.
    pub fn group_embedding(&self, trajs: &[&Trajectory]) -> Result<Vec<f64>> {
        if trajs.is_empty() {
            return Err(Error::Empty("group trajectories"));
        }
        let mut acc = vec![0.0; self.config.embed_dim];
        for t in trajs {
            for (a, v) in acc.iter_mut().zip(self.embed(t)?) {
                *a += v;
            }
        }
        let n = trajs.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}

/// Joint-action one-hot helper shared with other modules.
pub fn joint_action_one_hot(joint: &[Option<usize>], n_actions: usize) -> Vec<f64> {
    let mut out = vec![0.0; joint.len() * n_actions];
    for (i, a) in joint.iter().enumerate() {
        if let Some(a) = a {
            out[i * n_actions + a] = 1.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    pub count: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRegistry {
    pub alpha: f64,
    pub clusters: Vec<Cluster>,
}

impl ClusterRegistry {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, clusters: Vec::new() }
    }

    pub fn n_groups(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }

    pub fn cluster_of(&self, group_id: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.members.contains(&group_id))
    }

    /// Adds `group_id` to cluster `m` (or a new cluster when `m == len`).
    pub fn commit(&mut self, group_id: usize, embedding: &[f64], m: usize) -> Result<()> {
        if m == self.clusters.len() {
            self.clusters.push(Cluster { mean: embedding.to_vec(), count: 1, members: vec![group_id] });
            return Ok(());
        }
        let c = self.clusters.get_mut(m).ok_or_else(|| Error::InvalidArgument(format!("no cluster {m}")))?;
        c.mean = candidate_embedding(embedding, Some((&c.mean, c.count)));
        c.count += 1;
        c.members.push(group_id);
        Ok(())
    }
}

/// Prior over existing clusters then a fresh one for the `k`-th group.
pub fn crp_prior(counts: &[usize], k: usize, alpha: f64) -> Result<Vec<f64>> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument("concentration must be positive".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("group index starts at 1".into()));
    }
    let total: usize = counts.iter().sum();
    if total != k - 1 {
        return Err(Error::InvalidArgument(format!("cluster counts sum to {total}, expected {}", k - 1)));
    }
    let denom = (k - 1) as f64 + alpha;
    let mut p: Vec<f64> = counts.iter().map(|&n| n as f64 / denom).collect();
    p.push(alpha / denom);
    Ok(p)
}

/// Cluster mean after hypothetically adding `v`; `existing` is `(mean, count)`.
pub fn candidate_embedding(v: &[f64], existing: Option<(&[f64], usize)>) -> Vec<f64> {
    match existing {
        None => v.to_vec(),
        Some((mean, n)) => {
            let n = n as f64;
            mean.iter().zip(v).map(|(m, x)| (n * m + x) / (n + 1.0)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Chosen index; equal to the number of clusters when a new one opens.
    pub cluster: usize,
    pub is_new: bool,
    /// Unnormalized log posterior per candidate (existing clusters, then new).
    pub log_scores: Vec<f64>,
}

/// Maximum a-posteriori cluster for embedding `v` with a caller-supplied
/// mean log-likelihood of the group's trajectories under a candidate
/// embedding. Ties go to the lowest index.
pub fn assign_with<F>(registry: &ClusterRegistry, v: &[f64], mut mean_log_lik: F) -> Result<Assignment>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let counts: Vec<usize> = registry.clusters.iter().map(|c| c.count).collect();
    let k = registry.n_groups() + 1;
    let prior = crp_prior(&counts, k, registry.alpha)?;
    let mut scores = Vec::with_capacity(prior.len());
    for (m, p) in prior.iter().enumerate() {
        let cand = match registry.clusters.get(m) {
            Some(c) => candidate_embedding(v, Some((&c.mean, c.count))),
            None => candidate_embedding(v, None),
        };
        scores.push(p.ln() + mean_log_lik(&cand)?);
    }
    let mut best = 0;
    for (m, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = m;
        }
    }
    Ok(Assignment { cluster: best, is_new: best == registry.clusters.len(), log_scores: scores })
}

/// Assigns a group using the behaviour model's decoder as the likelihood.
pub fn assign_cluster(
    model: &BehaviorModel,
    registry: &ClusterRegistry,
    trajs: &[&Trajectory],
) -> Result<(Vec<f64>, Assignment)> {
    let v = model.group_embedding(trajs)?;
    let a = assign_with(registry, &v, |cand| model.mean_log_likelihood(trajs, cand))?;
    Ok((v, a))
}

/// Minibatch drawn uniformly with replacement.
pub fn sample_batch<'a, R: Rng + ?Sized>(all: &[&'a Trajectory], size: usize, rng: &mut R) -> Vec<&'a Trajectory> {
    (0..size).map(|_| all[rng.random_range(0..all.len())]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::OpenEnvConfig;
    use crate::stats::spearman_trend;
    use crate::teammates::{collect_trajectories, Archetype, TeammatePolicy, TeammatePool, UniformPartner};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn family_trajs(arch: Archetype, count: usize, seed: u64) -> Vec<Trajectory> {
        let cfg = OpenEnvConfig::lbf_default();
        let mut pool = TeammatePool::new(cfg.env_kind);
        let id = pool.add(TeammatePolicy::scripted(arch, 0.0), arch.name().into(), seed);
        let mut partner = UniformPartner { n_actions: cfg.n_actions() };
        collect_trajectories(&mut pool, id, &cfg, count, &mut partner, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn model(seed: u64) -> BehaviorModel {
        let cfg = OpenEnvConfig::lbf_default();
        let c = BehaviorModelConfig::new(cfg.state_dim(), cfg.n_entities(), cfg.n_actions(), cfg.horizon);
        BehaviorModel::new(c, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn prior_values() {
        let p = crp_prior(&[2, 1], 4, 0.5).unwrap();
        for (a, b) in p.iter().zip([2.0 / 3.5, 1.0 / 3.5, 0.5 / 3.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(crp_prior(&[], 1, 0.5).unwrap(), vec![1.0]);
        assert!(crp_prior(&[1], 2, 0.0).is_err());
        assert!(crp_prior(&[1], 3, 1.0).is_err());
    }

    #[test]
    fn candidate_merges() {
        assert_eq!(candidate_embedding(&[1.0, 1.0], Some((&[0.0, 0.0], 3))), vec![0.25, 0.25]);
        assert_eq!(candidate_embedding(&[1.0, 3.0], None), vec![1.0, 3.0]);
        assert_eq!(candidate_embedding(&[2.0], Some((&[0.0], 1))), vec![1.0]);
    }

    #[test]
    fn uniform_decoder_scores_minus_t_log_j() {
        let mut m = model(0);
        for id in [m.dec_head.w, m.dec_head.b] {
            m.store.get_mut(id).fill(0.0);
        }
        let trajs = family_trajs(Archetype::RandomWalker, 4, 1);
        for t in &trajs {
            let v = m.embed(t).unwrap();
            let present: usize = t.joint_actions.iter().map(|j| j.iter().flatten().count()).sum();
            let expect = -(present as f64) * (m.config.n_actions as f64).ln();
            assert!((m.action_log_likelihood(t, &v).unwrap() - expect).abs() < 1e-9);
        }
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let mut tape = Tape::new();
        let loss = m.model_loss(&mut tape, &refs).unwrap();
        let mean_present = trajs
            .iter()
            .map(|t| t.joint_actions.iter().map(|j| j.iter().flatten().count()).sum::<usize>() as f64)
            .sum::<f64>()
            / trajs.len() as f64;
        assert!((tape.scalar(loss) - mean_present * (m.config.n_actions as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let m = model(1);
        let trajs = family_trajs(Archetype::NearestFood, 3, 2);
        let v = m.embed(&trajs[0]).unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(v, m.embed(&trajs[0].clone()).unwrap());
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        assert_eq!(m.group_embedding(&refs[..1]).unwrap(), v);
        let fwd = m.group_embedding(&refs).unwrap();
        let rev: Vec<&Trajectory> = refs.iter().rev().copied().collect();
        let back = m.group_embedding(&rev).unwrap();
        assert!(fwd.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(m.group_embedding(&[]).is_err());
        let mut long = trajs[0].clone();
        while long.states.len() <= m.config.max_len {
            long.states.push(long.states[0].clone());
        }
        assert!(matches!(m.embed(&long), Err(Error::TooLong { .. })));
    }

    /// Brute-force posterior: enumerate every candidate explicitly.
    fn oracle(counts: &[usize], means: &[Vec<f64>], alpha: f64, v: &[f64], ll: &dyn Fn(&[f64]) -> f64) -> usize {
        let k: usize = counts.iter().sum::<usize>() + 1;
        let denom = (k - 1) as f64 + alpha;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for m in 0..=counts.len() {
            let (prior, cand): (f64, Vec<f64>) = if m < counts.len() {
                let n = counts[m] as f64;
                (n / denom, means[m].iter().zip(v).map(|(a, b)| (n * a + b) / (n + 1.0)).collect())
            } else {
                (alpha / denom, v.to_vec())
            };
            let post = prior * ll(&cand).exp();
            if post > best.0 {
                best = (post, m);
            }
        }
        best.1
    }

    #[test]
    fn assignment_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = rng.random_range(0..4);
            let mut reg = ClusterRegistry::new(rng.random_range(0.1..3.0));
            let mut gid = 0;
            for c in 0..m {
                let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                for _ in 0..rng.random_range(1..4) {
                    reg.commit(gid, &mean, c).unwrap();
                    gid += 1;
                }
            }
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let target: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ll = |c: &[f64]| -c.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let got = assign_with(&reg, &v, |c| Ok(ll(c))).unwrap();
            let counts: Vec<usize> = reg.clusters.iter().map(|c| c.count).collect();
            let means: Vec<Vec<f64>> = reg.clusters.iter().map(|c| c.mean.clone()).collect();
            assert_eq!(got.cluster, oracle(&counts, &means, reg.alpha, &v, &ll));
            // shifting every log-likelihood by a constant leaves the argmax alone
            let shifted = assign_with(&reg, &v, |c| Ok(ll(c) + 17.0)).unwrap();
            assert_eq!(shifted.cluster, got.cluster);
        }
    }

    #[test]
    fn empty_registry_opens_first_cluster_and_counts_add_up() {
        let mut reg = ClusterRegistry::new(0.5);
        let a = assign_with(&reg, &[1.0], |_| Ok(-100.0)).unwrap();
        assert!(a.is_new && a.cluster == 0);
        for g in 0..6 {
            let a = assign_with(&reg, &[g as f64], |c| Ok(-c[0].abs())).unwrap();
            reg.commit(g, &[g as f64], a.cluster).unwrap();
        }
        assert_eq!(reg.n_groups(), 6);
        assert!(reg.clusters.iter().all(|c| c.count >= 1 && c.count == c.members.len()));
        // uninformative likelihood: second group is new with probability α/(1+α) < 1/2
        let mut one = ClusterRegistry::new(0.5);
        one.commit(0, &[0.0], 0).unwrap();
        let a = assign_with(&one, &[3.0], |_| Ok(0.0)).unwrap();
        assert!((a.log_scores[1] - (0.5f64 / 1.5).ln()).abs() < 1e-12 && !a.is_new);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut reg = ClusterRegistry::new(1.0);
        reg.commit(0, &[0.0], 0).unwrap();
        // prior 1/2 each, constant likelihood
        let a = assign_with(&reg, &[0.0], |_| Ok(0.0)).unwrap();
        assert_eq!(a.cluster, 0);
    }

    #[test]
    fn model_loss_gradient_matches_finite_differences() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut c = BehaviorModelConfig::new(cfg.state_dim(), cfg.n_entities(), cfg.n_actions(), cfg.horizon);
        c.d_model = 8;
        c.embed_dim = 3;
        c.decoder_hidden = 4;
        c.n_layers = 1;
        let m = BehaviorModel::new(c, &mut ChaCha8Rng::seed_from_u64(9));
        let mut t = family_trajs(Archetype::NearestFood, 1, 3).remove(0);
        let keep = 2;
        t.states.truncate(keep + 1);
        t.obs.truncate(keep + 1);
        t.actions.truncate(keep);
        t.joint_actions.truncate(keep);
        let loss_of = |mm: &BehaviorModel| {
            let mut tape = Tape::new();
            let l = mm.model_loss(&mut tape, &[&t]).unwrap();
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let l = m.model_loss(&mut tape, &[&t]).unwrap();
        let grads = tape.backward(l);
        let h = 1e-4;
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            let g = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros(m.store.get(id).dim()));
            let cols = m.store.get(id).ncols();
            // every third entry keeps the test quick
            for k in (0..m.store.get(id).len()).step_by(3) {
                let (r, cc) = (k / cols, k % cols);
                let at = |d: f64| {
                    let mut p = m.clone();
                    p.store.get_mut(id)[[r, cc]] += d;
                    loss_of(&p)
                };
                // five-point stencil: the loss is O(10), so a two-point quotient drowns small gradients in rounding
                let num = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                let a = g[[r, cc]];
                let rel = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{}[{r},{cc}] {a} vs {num}", m.store.name(id));
            }
        }
    }

    #[test]
    fn training_separates_two_families() {
        let a = family_trajs(Archetype::NearestFood, 48, 10);
        let b = family_trajs(Archetype::RandomWalker, 48, 11);
        let train: Vec<&Trajectory> = a[..32].iter().chain(&b[..32]).collect();
        let mut m = model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let batch = sample_batch(&train, 16, &mut rng);
            losses.push(m.train_step(&batch).unwrap());
        }
        assert!(spearman_trend(&losses) < 0.0);

        let held_a: Vec<&Trajectory> = a[32..].iter().collect();
        let held_b: Vec<&Trajectory> = b[32..].iter().collect();
        let va = m.group_embedding(&held_a).unwrap();
        let vb = m.group_embedding(&held_b).unwrap();
        assert!(m.mean_log_likelihood(&held_a, &va).unwrap() > m.mean_log_likelihood(&held_a, &vb).unwrap());
        assert!(m.mean_log_likelihood(&held_b, &vb).unwrap() > m.mean_log_likelihood(&held_b, &va).unwrap());

        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            d / (x.iter().map(|p| p * p).sum::<f64>().sqrt() * y.iter().map(|q| q * q).sum::<f64>().sqrt())
        };
        let ea: Vec<Vec<f64>> = a.iter().take(32).map(|t| m.embed(t).unwrap()).collect();
        let eb: Vec<Vec<f64>> = b.iter().take(32).map(|t| m.embed(t).unwrap()).collect();
        let mean_cos = |xs: &[Vec<f64>], ys: &[Vec<f64>], same: bool| {
            let mut acc = (0.0, 0);
            for (i, x) in xs.iter().enumerate() {
                for (j, y) in ys.iter().enumerate() {
                    if !(same && i == j) {
                        acc.0 += cos(x, y);
                        acc.1 += 1;
                    }
                }
            }
            acc.0 / acc.1 as f64
        };
        let within = (mean_cos(&ea, &ea, true) + mean_cos(&eb, &eb, true)) / 2.0;
        assert!(within > mean_cos(&ea, &eb, false));
    }
}
