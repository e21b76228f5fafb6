//! Training loop: teammate generation and clustering, stationary rollouts,
//! replay and joint optimisation of value and context networks.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{
    consistency_loss, mi_loss, rec_loss, ClusterSamples, GlobalContextEncoder, LocalContextEncoder, LossWeights,
    MovingAverageBank, TeammateReconstructor, VariationalHead,
};
use crate::crp::{assign_cluster, BehaviorModel, BehaviorModelConfig, ClusterRegistry};
use crate::env::{OpenEnvConfig, SuddenChangeDist};
use crate::error::{Error, Result};
use crate::nn::{reparameterize, standard_normal, Adam, GaussianOut};
use crate::qmix::{epsilon_at, select_action, td_loss, td_targets, AgentQNetwork, MonotonicMixer, TargetBundle};
use crate::tape::{ParamStore, Tape, Var};
use crate::teammates::{
    collect_trajectories, generate_group, run_episode, sample_training_group, Archetype, GroupRecipe, JointPolicy,
    TeammatePool, Trajectory, UniformPartner,
};
use crate::env::FixedTeammates;

/// Replay records are whole stationary episodes.
pub type EpisodeBatch = Trajectory;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where new teammate groups come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilySpec {
    Scripted { archetype: Archetype },
    SelfPlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Families cycled through in order as groups are generated.
    pub families: Vec<FamilySpec>,
    /// Per-group random-action probability drawn uniformly from this range.
    pub noise_range: [f64; 2],
    pub groups_per_iteration: usize,
    pub generation_interval: u64,
    pub max_groups: usize,
    pub trajectories_per_group: usize,
    pub self_play_steps: usize,
    /// Collect group trajectories with uniformly random controllable agents.
    /// When off, the current policy snapshot plays with the new group; its
    /// drift between generations then leaks into the embeddings and later
    /// groups stop joining earlier clusters.
    #[serde(default)]
    pub uniform_partner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrpConfig {
    pub alpha: f64,
    pub embed_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub decoder_hidden: usize,
    pub lr: f64,
    /// Optimizer steps on the behaviour model after each generation.
    pub train_steps: usize,
    pub batch_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub z_dim: usize,
    pub e_dim: usize,
    pub hidden: usize,
    pub eta: f64,
    pub kappa: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmixConfig {
    pub hidden: usize,
    pub mixer_embed: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub sync_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub wo_crp: bool,
    #[serde(default)]
    pub wo_gce: bool,
    #[serde(default)]
    pub wo_mi: bool,
    #[serde(default)]
    pub wo_lce: bool,
    #[serde(default)]
    pub wo_rec: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Self { wo_crp: true, wo_gce: true, wo_mi: true, wo_lce: true, wo_rec: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSection {
    pub total_env_steps: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub seed: u64,
    /// Env steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_interval: u64,
    /// Env steps between evaluation snapshots (0 disables them).
    pub eval_interval: u64,
    pub eval_episodes: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: OpenEnvConfig,
    pub pool: PoolConfig,
    pub crp: CrpConfig,
    pub context: ContextConfig,
    pub qmix: QmixConfig,
    pub trainer: TrainerSection,
}

impl TrainConfig {
    /// Foraging defaults with three scripted teammate families.
    pub fn lbf_default() -> Self {
        Self {
            env: OpenEnvConfig::lbf_default(),
            pool: PoolConfig {
                families: vec![
                    FamilySpec::Scripted { archetype: Archetype::NearestFood },
                    FamilySpec::Scripted { archetype: Archetype::Follower },
                    FamilySpec::Scripted { archetype: Archetype::RandomWalker },
                ],
                noise_range: [0.0, 0.1],
                groups_per_iteration: 4,
                generation_interval: 50_000,
                max_groups: 16,
                trajectories_per_group: 32,
                self_play_steps: 5_000,
                uniform_partner: true,
            },
            crp: CrpConfig {
                alpha: 0.5,
                embed_dim: 16,
                d_model: 32,
                n_layers: 2,
                decoder_hidden: 16,
                lr: 1e-3,
                train_steps: 200,
                batch_trajectories: 32,
            },
            context: ContextConfig { z_dim: 6, e_dim: 4, hidden: 64, eta: 0.01, kappa: 80.0, weights: LossWeights::lbf() },
            qmix: QmixConfig {
                hidden: 64,
                mixer_embed: 32,
                lr: 5e-4,
                grad_clip: 10.0,
                sync_interval: 200,
                epsilon_start: 1.0,
                epsilon_end: 0.05,
                epsilon_anneal_steps: 50_000,
            },
            trainer: TrainerSection {
                total_env_steps: 200_000,
                batch_size: 16,
                replay_capacity: 1_000,
                seed: 0,
                checkpoint_interval: 50_000,
                eval_interval: 0,
                eval_episodes: 20,
                ablation: Ablation::default(),
            },
        }
    }

    /// Predator-prey defaults.
    pub fn pp_default() -> Self {
        let mut c = Self::lbf_default();
        c.env = OpenEnvConfig::pp_default();
        c.pool.families = vec![
            FamilySpec::Scripted { archetype: Archetype::DirectChaser },
            FamilySpec::Scripted { archetype: Archetype::Flanker },
            FamilySpec::Scripted { archetype: Archetype::Lazy },
        ];
        c.crp.alpha = 2.5;
        c.context.z_dim = 20;
        c.context.e_dim = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.context.weights.validate()?;
        let t = &self.trainer;
        if t.batch_size == 0 || t.replay_capacity < t.batch_size {
            return Err(Error::Config("replay capacity must be at least the batch size".into()));
        }
        if self.crp.alpha <= 0.0 {
            return Err(Error::Config("CRP concentration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.context.eta) || self.context.kappa <= 0.0 {
            return Err(Error::Config("eta must lie in [0,1] and kappa be positive".into()));
        }
        if self.pool.families.is_empty() || self.pool.groups_per_iteration == 0 {
            return Err(Error::Config("pool needs at least one family and one group per iteration".into()));
        }
        let [lo, hi] = self.pool.noise_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config("noise range must lie within [0, 1]".into()));
        }
        for f in &self.pool.families {
            if let FamilySpec::Scripted { archetype } = f {
                if archetype.env_kind() != self.env.env_kind {
                    return Err(Error::Config(format!("{} does not fit this environment", archetype.name())));
                }
            }
        }
        Ok(())
    }

    /// Loss weights after applying ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let a = &self.trainer.ablation;
        let w = self.context.weights;
        LossWeights {
            gce: if a.wo_gce { 0.0 } else { w.gce },
            mi: if a.wo_mi { 0.0 } else { w.mi },
            lce: if a.wo_lce { 0.0 } else { w.lce },
            rec: if a.wo_rec { 0.0 } else { w.rec },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_slice(&fs::read(path)?)?;
        c.validate()?;
        Ok(c)
    }
}

/// Every network the controllable team trains, in one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub store: ParamStore,
    pub global_enc: GlobalContextEncoder,
    pub local_encs: Vec<LocalContextEncoder>,
    pub agent: AgentQNetwork,
    pub mixer: MonotonicMixer,
    pub var_heads: Vec<VariationalHead>,
    pub recons: Vec<TeammateReconstructor>,
    pub target: TargetBundle,
    pub opt: Adam,
    pub n_agents: usize,
    pub n_entities: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
}

impl Learner {
    pub fn new<R: Rng>(env: &OpenEnvConfig, ctx: &ContextConfig, q: &QmixConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let n = env.n_controllable;
        let a = env.n_actions();
        let obs = env.obs_dim();
        let state = env.state_dim();
        let global_enc =
            GlobalContextEncoder::new(&mut store, "global", state + env.n_entities() * a, ctx.z_dim, ctx.hidden, rng);
        let local_encs = (0..n)
            .map(|i| LocalContextEncoder::new(&mut store, &format!("local{i}"), obs + a, ctx.e_dim, ctx.hidden, rng))
            .collect();
        let agent = AgentQNetwork::new(&mut store, obs, a, n, ctx.e_dim, q.hidden, rng);
        let mixer = MonotonicMixer::new(&mut store, n, state + ctx.z_dim, q.mixer_embed, rng);
        let var_heads = (0..n)
            .map(|i| VariationalHead::new(&mut store, &format!("varq{i}"), ctx.z_dim + ctx.hidden, ctx.e_dim, ctx.hidden, rng))
            .collect();
        let recons = (0..n)
            .map(|i| {
                TeammateReconstructor::new(
                    &mut store,
                    &format!("rec{i}"),
                    ctx.e_dim,
                    env.max_teammates,
                    obs,
                    a,
                    ctx.hidden,
                    rng,
                )
            })
            .collect();
        let target = TargetBundle::new(&store, q.sync_interval);
        let opt = Adam::new(&store, q.lr, Some(q.grad_clip));
        Self {
            store,
            global_enc,
            local_encs,
            agent,
            mixer,
            var_heads,
            recons,
            target,
            opt,
            n_agents: n,
            n_entities: env.n_entities(),
            n_actions: a,
            obs_dim: obs,
            state_dim: state,
        }
    }

    pub fn e_dim(&self) -> usize {
        self.agent.e_dim
    }
}

/// Decentralised actor: local encoders feed the shared agent network.
#[derive(Debug, Clone)]
pub struct Actor<'a> {
    pub learner: &'a Learner,
    pub epsilon: f64,
    enc_h: Vec<Array2<f64>>,
    q_h: Array2<f64>,
    prev: Vec<Option<usize>>,
    /// Local context mean of each agent at the latest step.
    pub last_contexts: Vec<Vec<f64>>,
    /// Every context produced since the episode began, `[t][agent]`.
    pub context_log: Vec<Vec<Vec<f64>>>,
}

impl<'a> Actor<'a> {
    pub fn new(learner: &'a Learner, epsilon: f64) -> Self {
        let n = learner.n_agents;
        Self {
            learner,
            epsilon,
            enc_h: vec![Array2::zeros((1, learner.local_encs[0].hidden())); n],
            q_h: Array2::zeros((n, learner.agent.gru.hidden)),
            prev: vec![None; n],
            last_contexts: vec![vec![0.0; learner.e_dim()]; n],
            context_log: Vec::new(),
        }
    }

    /// Q values of every agent for the given observations, advancing recurrent state.
    pub fn q_values(&mut self, obs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let l = self.learner;
        let n = l.n_agents;
        let mut tape = Tape::new();
        let mut es = Vec::with_capacity(n);
        for (i, o) in obs.iter().enumerate() {
            let mut row = o.clone();
            let mut a = vec![0.0; l.n_actions];
            if let Some(p) = self.prev[i] {
                a[p] = 1.0;
            }
            row.extend(a);
            let x = tape.constant(Array2::from_shape_vec((1, row.len()), row).expect("row"));
            let h = tape.constant(self.enc_h[i].clone());
            let (g, h2) = l.local_encs[i].step(&mut tape, &l.store, x, h);
            self.enc_h[i] = tape.value(h2).clone();
            self.last_contexts[i] = tape.value(g.mu).iter().copied().collect();
            es.push(g.mu);
        }
        self.context_log.push(self.last_contexts.clone());
        let base: Vec<f64> = obs.iter().enumerate().flat_map(|(i, o)| l.agent.base_input(o, self.prev[i], i)).collect();
        let width = base.len() / n;
        let base = tape.constant(Array2::from_shape_vec((n, width), base).expect("rows"));
        let e = tape.concat_rows(&es);
        let h = tape.constant(self.q_h.clone());
        let (q, h2) = l.agent.forward(&mut tape, &l.store, base, e, h);
        self.q_h = tape.value(h2).clone();
        tape.value(q).rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

impl JointPolicy for Actor<'_> {
    fn begin_episode(&mut self, _n_agents: usize) {
        let fresh = Actor::new(self.learner, self.epsilon);
        *self = fresh;
    }

    fn act(&mut self, obs: &[Vec<f64>], _state: &[f64], rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let qs = self.q_values(obs);
        let avail = vec![true; self.learner.n_actions];
        let mut out = Vec::with_capacity(qs.len());
        for q in &qs {
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("agent Q values".into()));
            }
            out.push(select_action(q, self.epsilon, &avail, rng)?);
        }
        for (p, a) in self.prev.iter_mut().zip(&out) {
            *p = Some(*a);
        }
        Ok(out)
    }
}

/// FIFO store of complete episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub episodes: VecDeque<EpisodeBatch>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, episodes: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, ep: EpisodeBatch) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&EpisodeBatch> {
        (0..n).map(|_| &self.episodes[rng.random_range(0..self.episodes.len())]).collect()
    }

    pub fn sample_cluster<R: Rng + ?Sized>(&self, cluster: usize, n: usize, rng: &mut R) -> Vec<&EpisodeBatch> {
        let idx: Vec<usize> =
            (0..self.episodes.len()).filter(|&i| self.episodes[i].cluster_id == Some(cluster)).collect();
        if idx.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.episodes[idx[rng.random_range(0..idx.len())]]).collect()
    }

    /// `n` draws, each picking a cluster uniformly and then an episode within it.
    pub fn sample_stratified<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&EpisodeBatch> {
        let mut by_cluster: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.episodes.iter().enumerate() {
            by_cluster.entry(e.cluster_id).or_default().push(i);
        }
        let keys: Vec<_> = by_cluster.keys().copied().collect();
        if keys.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let members = &by_cluster[&keys[rng.random_range(0..keys.len())]];
                &self.episodes[members[rng.random_range(0..members.len())]]
            })
            .collect()
    }
}

/// Loss values and diagnostics of one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub kind: String,
    pub update: u64,
    pub env_steps: u64,
    pub td: f64,
    pub gce: Option<f64>,
    pub mi: Option<f64>,
    pub lce: Option<f64>,
    pub rec: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub z_bar_norms: BTreeMap<usize, f64>,
    pub n_clusters: usize,
    pub epsilon: f64,
    pub mean_return: f64,
    pub skipped: u64,
}

/// Per-component values from [`compute_losses`] before any update.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub td: f64,
    pub gce: Option<f64>,
    pub mi: Option<f64>,
    pub lce: Option<f64>,
    pub rec: Option<f64>,
    pub total: f64,
    pub z_bars: Vec<(usize, Vec<f64>)>,
    pub e_bars: Vec<(usize, usize, Vec<f64>)>,
}

/// Noise for the reparameterised draws of one batch.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    /// `[t]` → `B×z_dim`.
    pub z: Vec<Array2<f64>>,
    /// `[agent][t]` → `B×e_dim`.
    pub e: Vec<Vec<Array2<f64>>>,
}

impl BatchNoise {
    pub fn draw<R: Rng>(learner: &Learner, batch: usize, steps: usize, rng: &mut R) -> Self {
        let z_dim = learner.global_enc.dim();
        let e_dim = learner.e_dim();
        Self {
            z: (0..steps).map(|_| standard_normal(rng, batch, z_dim)).collect(),
            e: (0..learner.n_agents).map(|_| (0..steps).map(|_| standard_normal(rng, batch, e_dim)).collect()).collect(),
        }
    }
}

struct BatchInputs {
    b: usize,
    t_max: usize,
    /// `[t]` → `B×(state + joint action)`; covers `t_max + 1` steps.
    global_in: Vec<Array2<f64>>,
    /// `[agent][t]` → `B×(obs + action)`.
    local_in: Vec<Vec<Array2<f64>>>,
    /// `[t]` → `(n·B)×(obs + action + id)`, agent-major rows.
    agent_base: Vec<Array2<f64>>,
    states: Vec<Array2<f64>>,
    /// `[t]` → chosen action per agent-major row.
    actions: Vec<Vec<usize>>,
    /// Row `t·B + b` valid when `t < len_b`.
    valid: Vec<usize>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    clusters: Vec<usize>,
}

fn build_inputs(learner: &Learner, batch: &[&EpisodeBatch]) -> Result<BatchInputs> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Empty("episode batch"));
    }
    let t_max = batch.iter().map(|e| e.len()).max().unwrap_or(0);
    if t_max == 0 {
        return Err(Error::Empty("episode steps"));
    }
    let (n, a) = (learner.n_agents, learner.n_actions);
    let ne = learner.n_entities;
    let sd = learner.state_dim;
    let od = learner.obs_dim;
    let mut global_in = Vec::with_capacity(t_max + 1);
    let mut states = Vec::with_capacity(t_max + 1);
    let mut local_in = vec![Vec::with_capacity(t_max + 1); n];
    let mut agent_base = Vec::with_capacity(t_max + 1);
    let mut actions = Vec::with_capacity(t_max);
    for t in 0..=t_max {
        let mut g = Array2::zeros((b, sd + ne * a));
        let mut s = Array2::zeros((b, sd));
        let mut base = Array2::zeros((n * b, od + a + n));
        let mut li: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((b, od + a))).collect();
        for (r, ep) in batch.iter().enumerate() {
            if t > ep.len() {
                continue;
            }
            for (j, &v) in ep.states[t].iter().enumerate() {
                g[[r, j]] = v;
                s[[r, j]] = v;
            }
            if t > 0 {
                for (k, act) in ep.joint_actions[t - 1].iter().enumerate() {
                    if let Some(act) = act {
                        g[[r, sd + k * a + act]] = 1.0;
                    }
                }
            }
            for i in 0..n {
                let row = i * b + r;
                for (j, &v) in ep.obs[t][i].iter().enumerate() {
                    base[[row, j]] = v;
                    li[i][[r, j]] = v;
                }
                if t > 0 {
                    let prev = ep.actions[t - 1][i];
                    base[[row, od + prev]] = 1.0;
                    li[i][[r, od + prev]] = 1.0;
                }
                base[[row, od + a + i]] = 1.0;
            }
        }
        global_in.push(g);
        states.push(s);
        agent_base.push(base);
        for (i, x) in li.into_iter().enumerate() {
            local_in[i].push(x);
        }
        if t < t_max {
            let mut acts = vec![0; n * b];
            for (r, ep) in batch.iter().enumerate() {
                if t < ep.len() {
                    for i in 0..n {
                        acts[i * b + r] = ep.actions[t][i];
                    }
                }
            }
            actions.push(acts);
        }
    }
    let mut valid = Vec::new();
    let mut rewards = Vec::new();
    let mut dones = Vec::new();
    for t in 0..t_max {
        for (r, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                valid.push(t * b + r);
                rewards.push(ep.rewards[t]);
                dones.push(ep.dones[t]);
            }
        }
    }
    let clusters = batch
        .iter()
        .map(|e| e.cluster_id.ok_or_else(|| Error::InvalidArgument("episode without cluster id".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchInputs { b, t_max, global_in, local_in, agent_base, states, actions, valid, rewards, dones, clusters })
}

/// Stacks agent-major `(n·B)×1` chosen values into `B×n`.
fn agents_to_columns(tape: &mut Tape, chosen: Var, n: usize, b: usize) -> Var {
    let cols: Vec<Var> = (0..n).map(|i| tape.slice_rows(chosen, i * b, b)).collect();
    tape.concat_cols(&cols)
}

/// Bootstrapped TD targets from the target networks (context means, no noise).
fn target_values(learner: &Learner, inp: &BatchInputs, gamma: f64) -> Result<Vec<f64>> {
    let store = &learner.target.store;
    let (n, b) = (learner.n_agents, inp.b);
    let mut tape = Tape::new();
    let global = learner.global_enc.unroll(&mut tape, store, &inp.global_in)?;
    let locals = learner
        .local_encs
        .iter()
        .zip(&inp.local_in)
        .map(|(enc, xs)| enc.unroll(&mut tape, store, xs))
        .collect::<Result<Vec<_>>>()?;
    let mut h = tape.constant(Array2::zeros((n * b, learner.agent.gru.hidden)));
    let all_avail = Array2::ones((n * b, learner.n_actions));
    let mut next_tot = vec![0.0; inp.t_max * b];
    for t in 0..=inp.t_max {
        let es: Vec<Var> = locals.iter().map(|l| l[t].0.mu).collect();
        let e = tape.concat_rows(&es);
        let base = tape.constant(inp.agent_base[t].clone());
        let (q, h2) = learner.agent.forward(&mut tape, store, base, e, h);
        h = h2;
        if t == 0 {
            continue;
        }
        let best = tape.masked_max_rows(q, &all_avail);
        let qb = agents_to_columns(&mut tape, best, n, b);
        let s = tape.constant(inp.states[t].clone());
        let cond = tape.concat_cols(&[s, global[t].0.mu]);
        let tot = learner.mixer.forward(&mut tape, store, qb, cond)?;
        for (r, v) in tape.value(tot).iter().enumerate() {
            next_tot[(t - 1) * b + r] = *v;
        }
    }
    let next: Vec<f64> = inp.valid.iter().map(|&row| next_tot[row]).collect();
    Ok(td_targets(&inp.rewards, &inp.dones, &next, gamma))
}

/// Builds every loss on `tape` for a sampled batch; returns the weighted
/// total and the per-component values.
pub fn compute_losses(
    tape: &mut Tape,
    learner: &Learner,
    batch: &[&EpisodeBatch],
    bank: &MovingAverageBank,
    all_clusters: &[usize],
    config: &TrainConfig,
    noise: &BatchNoise,
) -> Result<(Var, LossBreakdown)> {
    let inp = build_inputs(learner, batch)?;
    let weights = config.effective_weights();
    let ctx = &config.context;
    let store = &learner.store;
    let (n, b, t_max) = (learner.n_agents, inp.b, inp.t_max);

    let targets = target_values(learner, &inp, config.env.gamma)?;

    // live forward over t = 0..t_max-1
    let global = learner.global_enc.unroll(tape, store, &inp.global_in[..t_max])?;
    let locals = learner
        .local_encs
        .iter()
        .zip(&inp.local_in)
        .map(|(enc, xs)| enc.unroll(tape, store, &xs[..t_max]))
        .collect::<Result<Vec<_>>>()?;
    let z: Vec<Var> = (0..t_max).map(|t| reparameterize(tape, global[t].0, noise.z[t].clone())).collect();
    let e: Vec<Vec<Var>> = (0..n)
        .map(|i| (0..t_max).map(|t| reparameterize(tape, locals[i][t].0, noise.e[i][t].clone())).collect())
        .collect();

    let mut h = tape.constant(Array2::zeros((n * b, learner.agent.gru.hidden)));
    let mut tots = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let es: Vec<Var> = (0..n).map(|i| e[i][t]).collect();
        let et = tape.concat_rows(&es);
        let base = tape.constant(inp.agent_base[t].clone());
        let (q, h2) = learner.agent.forward(tape, store, base, et, h);
        h = h2;
        let chosen = tape.gather(q, &inp.actions[t]);
        let qb = agents_to_columns(tape, chosen, n, b);
        let s = tape.constant(inp.states[t].clone());
        let cond = tape.concat_cols(&[s, z[t]]);
        tots.push(learner.mixer.forward(tape, store, qb, cond)?);
    }
    let all_tot = tape.concat_rows(&tots);
    let q_tot = tape.select_rows(all_tot, &inp.valid);
    let td = td_loss(tape, q_tot, &targets)?;
    let mut total = td;

    // rows of each cluster among valid rows
    let mut rows_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &row in &inp.valid {
        rows_of.entry(inp.clusters[row % b]).or_default().push(row);
    }
    let z_all = tape.concat_rows(&z);
    let mut breakdown = LossBreakdown {
        td: tape.scalar(td),
        gce: None,
        mi: None,
        lce: None,
        rec: None,
        total: 0.0,
        z_bars: Vec::new(),
        e_bars: Vec::new(),
    };

    // global consistency
    let groups: Vec<ClusterSamples> = rows_of
        .iter()
        .map(|(&c, rows)| ClusterSamples { cluster: c, samples: tape.select_rows(z_all, rows) })
        .collect();
    match consistency_loss(tape, &groups, &bank.z_bar, all_clusters, ctx.eta, ctx.kappa, None) {
        Ok(out) => {
            breakdown.gce = Some(tape.scalar(out.loss));
            breakdown.z_bars = out.updated;
            if weights.gce > 0.0 {
                let w = tape.scale(out.loss, weights.gce);
                total = tape.add(total, w);
            }
        }
        Err(err) if weights.gce > 0.0 => return Err(err),
        Err(_) => {}
    }

    // local consistency, one relational matrix per agent
    let e_all: Vec<Var> = (0..n).map(|i| tape.concat_rows(&e[i])).collect();
    let mut lce_total = tape.scalar_const(0.0);
    let mut lce_ok = true;
    for i in 0..n {
        let bars: BTreeMap<usize, Vec<f64>> = bank.e_bar.iter().map(|(&c, v)| (c, v[i].clone())).collect();
        let groups: Vec<ClusterSamples> = rows_of
            .iter()
            .map(|(&c, rows)| ClusterSamples { cluster: c, samples: tape.select_rows(e_all[i], rows) })
            .collect();
        match consistency_loss(tape, &groups, &bars, all_clusters, ctx.eta, ctx.kappa, None) {
            Ok(out) => {
                lce_total = tape.add(lce_total, out.loss);
                breakdown.e_bars.extend(out.updated.into_iter().map(|(c, v)| (c, i, v)));
            }
            Err(err) if weights.lce > 0.0 => return Err(err),
            Err(_) => lce_ok = false,
        }
    }
    if lce_ok {
        breakdown.lce = Some(tape.scalar(lce_total));
        if weights.lce > 0.0 {
            let w = tape.scale(lce_total, weights.lce);
            total = tape.add(total, w);
        }
    }

    // mutual-information bound and teammate reconstruction
    let z_detached = tape.detach(z_all);
    let mut mi_total = tape.scalar_const(0.0);
    let mut rec_total = tape.scalar_const(0.0);
    let slots = learner.recons[0].slots;
    for i in 0..n {
        let hidden: Vec<Var> = (0..t_max).map(|t| locals[i][t].1).collect();
        let hidden = tape.concat_rows(&hidden);
        let feats = tape.detach(hidden);
        let sig: Vec<Var> = (0..t_max).map(|t| locals[i][t].0.sigma).collect();
        let sig = tape.concat_rows(&sig);
        for rows in rows_of.values() {
            let e_rows = tape.select_rows(e_all[i], rows);
            let z_rows = tape.select_rows(z_detached, rows);
            let f_rows = tape.select_rows(feats, rows);
            let s_rows = tape.select_rows(sig, rows);
            let q: GaussianOut = learner.var_heads[i].forward(tape, store, z_rows, f_rows);
            let mi = mi_loss(tape, e_rows, q, s_rows);
            mi_total = tape.add(mi_total, mi);

            let od = learner.obs_dim;
            let mut target_obs = Array2::zeros((rows.len(), slots * od));
            let mut target_act = vec![vec![0; slots]; rows.len()];
            let mut mask = Array2::zeros((rows.len(), slots));
            for (k, &row) in rows.iter().enumerate() {
                let (t, r) = (row / b, row % b);
                let ep = batch[r];
                for s in 0..slots {
                    if ep.teammate_mask[t][s] {
                        mask[[k, s]] = 1.0;
                        for (j, &v) in ep.teammate_obs[t][s].iter().enumerate() {
                            target_obs[[k, s * od + j]] = v;
                        }
                        target_act[k][s] = ep.joint_actions[t][n + s].unwrap_or(0);
                    }
                }
            }
            let (pred_obs, logits) = learner.recons[i].forward(tape, store, e_rows);
            let rec = rec_loss(tape, pred_obs, logits, &target_obs, &target_act, &mask, od, learner.n_actions)?;
            rec_total = tape.add(rec_total, rec);
        }
    }
    breakdown.mi = Some(tape.scalar(mi_total));
    breakdown.rec = Some(tape.scalar(rec_total));
    if weights.mi > 0.0 {
        let w = tape.scale(mi_total, weights.mi);
        total = tape.add(total, w);
    }
    if weights.rec > 0.0 {
        let w = tape.scale(rec_total, weights.rec);
        total = tape.add(total, w);
    }
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

/// Samples a batch, applies one gradient step and refreshes the bank.
///
/// Returns `None` when the step was skipped because of a non-finite loss.
pub fn optimize_step(
    learner: &mut Learner,
    replay: &ReplayBuffer,
    bank: &mut MovingAverageBank,
    registry_clusters: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(LossBreakdown, f64)>> {
    let bs = config.trainer.batch_size;
    if replay.len() < bs {
        return Err(Error::InvalidArgument(format!("replay holds {} episodes, need {bs}", replay.len())));
    }
    let mut batch = replay.sample_stratified(bs, rng);
    batch.sort_by_key(|e| e.cluster_id);
    let t_max = batch.iter().map(|e| e.len()).max().unwrap_or(0);
    let noise = BatchNoise::draw(learner, bs, t_max, rng);
    let mut tape = Tape::new();
    let result = compute_losses(&mut tape, learner, &batch, bank, registry_clusters, config, &noise);
    let (total, breakdown) = match result {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !breakdown.total.is_finite() {
        return Ok(None);
    }
    let grads = tape.backward(total);
    if !grads.all_finite() {
        return Ok(None);
    }
    let norm = learner.opt.apply(&mut learner.store, &grads);
    learner.target.tick(&learner.store);
    for (c, v) in &breakdown.z_bars {
        bank.ensure(*c);
        bank.z_bar.insert(*c, v.clone());
    }
    for (c, i, v) in &breakdown.e_bars {
        bank.ensure(*c);
        bank.e_bar.get_mut(c).expect("ensured")[*i] = v.clone();
    }
    Ok(Some((breakdown, norm)))
}

/// Plays one stationary training episode with a fixed teammate group.
pub fn rollout_episode(
    learner: &Learner,
    pool: &TeammatePool,
    group_id: usize,
    cluster: usize,
    env: &OpenEnvConfig,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeBatch> {
    let group = pool.get(group_id).ok_or_else(|| Error::InvalidArgument(format!("no group {group_id}")))?;
    let mut cfg = env.clone();
    cfg.change_dist = SuddenChangeDist::never();
    let source = FixedTeammates { group_id, policy: group.policy.clone() };
    let mut actor = Actor::new(learner, epsilon);
    let mut ep = run_episode(&cfg, &source, &mut actor, rng)?;
    debug_assert!(ep.changes.iter().all(|c| !c), "training episodes must be stationary");
    ep.cluster_id = Some(cluster);
    Ok(ep)
}

/// Serialized training state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub learner: Learner,
    pub behavior: BehaviorModel,
    pub registry: ClusterRegistry,
    pub bank: MovingAverageBank,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub skipped: u64,
    pub next_generation: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ck: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: unreadable archive ({e})", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("{}: version {} unsupported", path.display(), ck.version)));
        }
        if !ck.learner.store.all_finite() {
            return Err(Error::Checkpoint(format!("{}: non-finite parameters", path.display())));
        }
        Ok(ck)
    }
}

/// Newest `ckpt_*.json` in a directory.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".json"))
        })
        .collect();
    found.sort();
    found.pop()
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub skipped: u64,
    pub n_groups: usize,
    pub n_clusters: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Whole training state with the loop of the training algorithm.
pub struct Trainer {
    pub config: TrainConfig,
    pub learner: Learner,
    pub behavior: BehaviorModel,
    pub registry: ClusterRegistry,
    pub bank: MovingAverageBank,
    pub pool: TeammatePool,
    pub replay: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub skipped: u64,
    pub next_generation: u64,
    pub run_dir: Option<PathBuf>,
    /// Every metrics line written so far in this process.
    pub metrics: Vec<String>,
    recent_returns: VecDeque<f64>,
    sink: Option<BufWriter<fs::File>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, run_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let learner = Learner::new(&config.env, &config.context, &config.qmix, &mut rng);
        let bcfg = BehaviorModelConfig {
            embed_dim: config.crp.embed_dim,
            d_model: config.crp.d_model,
            n_layers: config.crp.n_layers,
            decoder_hidden: config.crp.decoder_hidden,
            lr: config.crp.lr,
            ..BehaviorModelConfig::new(
                config.env.state_dim(),
                config.env.n_entities(),
                config.env.n_actions(),
                config.env.horizon,
            )
        };
        let behavior = BehaviorModel::new(bcfg, &mut rng);
        let registry = ClusterRegistry::new(config.crp.alpha);
        let bank = MovingAverageBank::new(config.context.eta, config.context.z_dim, config.context.e_dim, config.env.n_controllable);
        let pool = TeammatePool::new(config.env.env_kind);
        let replay = ReplayBuffer::new(config.trainer.replay_capacity);
        let sink = match &run_dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                fs::write(d.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
                Some(BufWriter::new(fs::File::create(d.join("metrics.jsonl"))?))
            }
            None => None,
        };
        Ok(Self {
            config,
            learner,
            behavior,
            registry,
            bank,
            pool,
            replay,
            rng,
            env_steps: 0,
            episodes: 0,
            updates: 0,
            skipped: 0,
            next_generation: 0,
            run_dir,
            metrics: Vec::new(),
            recent_returns: VecDeque::new(),
            sink,
        })
    }

    /// Restores a trainer from a checkpoint; the pool is read from `run_dir/pool`.
    pub fn resume(ckpt: &Path, run_dir: PathBuf) -> Result<Self> {
        let ck = Checkpoint::load(ckpt)?;
        let pool = TeammatePool::load(&run_dir.join("pool"))?;
        if pool.env_kind != ck.config.env.env_kind {
            return Err(Error::Checkpoint("pool and checkpoint belong to different environments".into()));
        }
        let sink = fs::OpenOptions::new().create(true).append(true).open(run_dir.join("metrics.jsonl"))?;
        let mut learner = ck.learner;
        learner.target.since_sync = 0;
        Ok(Self {
            replay: ReplayBuffer::new(ck.config.trainer.replay_capacity),
            config: ck.config,
            learner,
            behavior: ck.behavior,
            registry: ck.registry,
            bank: ck.bank,
            pool,
            rng: ck.rng,
            env_steps: ck.env_steps,
            episodes: ck.episodes,
            updates: ck.updates,
            skipped: ck.skipped,
            next_generation: ck.next_generation,
            run_dir: Some(run_dir),
            metrics: Vec::new(),
            recent_returns: VecDeque::new(),
            sink: Some(BufWriter::new(sink)),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            learner: self.learner.clone(),
            behavior: self.behavior.clone(),
            registry: self.registry.clone(),
            bank: self.bank.clone(),
            rng: self.rng.clone(),
            env_steps: self.env_steps,
            episodes: self.episodes,
            updates: self.updates,
            skipped: self.skipped,
            next_generation: self.next_generation,
        }
    }

    fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        if let Some(s) = &mut self.sink {
            s.write_all(line.as_bytes())?;
            s.write_all(b"\n")?;
        }
        self.metrics.push(line);
        Ok(())
    }

    pub fn cluster_ids(&self) -> Vec<usize> {
        (0..self.registry.clusters.len()).collect()
    }

    /// Generates up to `groups_per_iteration` new groups, trains the
    /// behaviour model and assigns the new groups to clusters.
    pub fn generate(&mut self) -> Result<Vec<usize>> {
        let pc = self.config.pool.clone();
        let eps = self.epsilon();
        let mut new_ids = Vec::new();
        for _ in 0..pc.groups_per_iteration {
            if self.pool.len() >= pc.max_groups {
                break;
            }
            let family = pc.families[self.pool.len() % pc.families.len()];
            let recipe = match family {
                FamilySpec::Scripted { archetype } => {
                    let [lo, hi] = pc.noise_range;
                    let noise = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
                    GroupRecipe::Scripted { archetype, noise }
                }
                FamilySpec::SelfPlay => GroupRecipe::SelfPlay { steps: pc.self_play_steps },
            };
            let id = generate_group(&mut self.pool, recipe, &self.config.env, &mut self.rng)?;
            let count = pc.trajectories_per_group;
            if pc.uniform_partner {
                let mut partner = UniformPartner { n_actions: self.config.env.n_actions() };
                collect_trajectories(&mut self.pool, id, &self.config.env, count, &mut partner, &mut self.rng)?;
            } else {
                let mut partner = Actor::new(&self.learner, eps);
                collect_trajectories(&mut self.pool, id, &self.config.env, count, &mut partner, &mut self.rng)?;
            }
            new_ids.push(id);
        }
        if new_ids.is_empty() {
            return Ok(new_ids);
        }
        if !self.config.trainer.ablation.wo_crp {
            self.train_behavior_model()?;
        }
        for &id in &new_ids {
            self.assign(id)?;
        }
        if let Some(d) = &self.run_dir {
            self.pool.save(&d.join("pool"))?;
            fs::write(d.join("registry.json"), serde_json::to_vec_pretty(&self.registry)?)?;
        }
        Ok(new_ids)
    }

    fn train_behavior_model(&mut self) -> Result<()> {
        let all: Vec<&Trajectory> = self.pool.groups.iter().flat_map(|g| g.buffer.iter()).collect();
        if all.is_empty() {
            return Ok(());
        }
        let bt = self.config.crp.batch_trajectories;
        for _ in 0..self.config.crp.train_steps {
            let batch = crate::crp::sample_batch(&all, bt, &mut self.rng);
            self.behavior.train_step(&batch)?;
        }
        self.refresh_cluster_means()
    }

    /// Re-embeds every assigned group with the retrained encoder and resets
    /// each cluster mean to the mean over its members.
    fn refresh_cluster_means(&mut self) -> Result<()> {
        for c in self.registry.clusters.iter_mut() {
            let mut acc = vec![0.0; self.config.crp.embed_dim];
            for &gid in &c.members {
                let g = self.pool.get_mut(gid).ok_or_else(|| Error::InvalidArgument(format!("no group {gid}")))?;
                let trajs: Vec<&Trajectory> = g.buffer.iter().collect();
                let v = self.behavior.group_embedding(&trajs)?;
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += x / c.members.len() as f64;
                }
                g.meta.embedding = Some(v);
            }
            c.mean = acc;
        }
        Ok(())
    }

    fn assign(&mut self, group_id: usize) -> Result<()> {
        let group = self.pool.get(group_id).expect("generated group");
        let trajs: Vec<&Trajectory> = group.buffer.iter().collect();
        let (embedding, cluster) = if self.config.trainer.ablation.wo_crp {
            (vec![0.0; self.config.crp.embed_dim], self.registry.clusters.len())
        } else {
            let (v, a) = assign_cluster(&self.behavior, &self.registry, &trajs)?;
            (v, a.cluster)
        };
        self.registry.commit(group_id, &embedding, cluster)?;
        self.bank.ensure(cluster);
        let g = self.pool.get_mut(group_id).expect("generated group");
        g.meta.cluster_id = Some(cluster);
        g.meta.embedding = Some(embedding);
        for t in g.buffer.iter_mut() {
            t.cluster_id = Some(cluster);
        }
        Ok(())
    }

    fn epsilon(&self) -> f64 {
        let q = &self.config.qmix;
        epsilon_at(self.env_steps, q.epsilon_start, q.epsilon_end, q.epsilon_anneal_steps)
    }

    /// One training episode plus, once the replay is warm, one update.
    pub fn train_episode(&mut self) -> Result<()> {
        if self.env_steps >= self.next_generation && self.pool.len() < self.config.pool.max_groups {
            self.generate()?;
            self.next_generation += self.config.pool.generation_interval.max(1);
        }
        let group_id = sample_training_group(&self.registry, &mut self.rng)?;
        let cluster = self.registry.cluster_of(group_id).expect("assigned group");
        let eps = self.epsilon();
        let ep = rollout_episode(&self.learner, &self.pool, group_id, cluster, &self.config.env, eps, &mut self.rng)?;
        self.env_steps += ep.len() as u64;
        self.episodes += 1;
        self.recent_returns.push_back(ep.episode_return());
        if self.recent_returns.len() > 100 {
            self.recent_returns.pop_front();
        }
        self.replay.push(ep);

        if self.replay.len() >= self.config.trainer.batch_size {
            let clusters = self.cluster_ids();
            match optimize_step(&mut self.learner, &self.replay, &mut self.bank, &clusters, &self.config, &mut self.rng)? {
                Some((b, norm)) => {
                    self.updates += 1;
                    let rec = StepMetrics {
                        kind: "update".into(),
                        update: self.updates,
                        env_steps: self.env_steps,
                        td: b.td,
                        gce: b.gce,
                        mi: b.mi,
                        lce: b.lce,
                        rec: b.rec,
                        total: b.total,
                        grad_norm: norm,
                        z_bar_norms: self
                            .bank
                            .z_bar
                            .iter()
                            .map(|(c, v)| (*c, v.iter().map(|x| x * x).sum::<f64>().sqrt()))
                            .collect(),
                        n_clusters: self.registry.clusters.len(),
                        epsilon: eps,
                        mean_return: self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64,
                        skipped: self.skipped,
                    };
                    self.log(&rec)?;
                }
                None => {
                    self.skipped += 1;
                }
            }
        }
        Ok(())
    }

    fn eval_snapshot(&mut self) -> Result<()> {
        let episodes = self.config.trainer.eval_episodes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.trainer.seed ^ self.env_steps);
        let report = crate::eval::evaluate_nonstationary(
            &self.learner,
            &self.config.env,
            &self.pool,
            &SuddenChangeDist::never(),
            episodes,
            &mut rng,
        )?;
        #[derive(Serialize)]
        struct EvalRecord {
            kind: &'static str,
            env_steps: u64,
            mean_return: f64,
            std_return: f64,
        }
        self.log(&EvalRecord {
            kind: "eval",
            env_steps: self.env_steps,
            mean_return: report.mean,
            std_return: report.std,
        })
    }

    /// Trains until `total_env_steps`, writing checkpoints and metrics.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let total = self.config.trainer.total_env_steps;
        let ck_every = self.config.trainer.checkpoint_interval;
        let ev_every = self.config.trainer.eval_interval;
        let mut next_ck = self.env_steps.checked_div(ck_every).map_or(u64::MAX, |k| (k + 1) * ck_every);
        let mut next_ev = self.env_steps.checked_div(ev_every).map_or(u64::MAX, |k| (k + 1) * ev_every);
        let mut written = Vec::new();
        while self.env_steps < total {
            self.train_episode()?;
            if self.env_steps >= next_ev {
                self.eval_snapshot()?;
                next_ev += ev_every;
            }
            if self.env_steps >= next_ck {
                if let Some(p) = self.save_checkpoint()? {
                    written.push(p);
                }
                next_ck += ck_every;
            }
        }
        if let Some(p) = self.save_checkpoint()? {
            written.push(p);
        }
        if let Some(s) = &mut self.sink {
            s.flush()?;
        }
        Ok(TrainSummary {
            env_steps: self.env_steps,
            episodes: self.episodes,
            updates: self.updates,
            skipped: self.skipped,
            n_groups: self.pool.len(),
            n_clusters: self.registry.clusters.len(),
            checkpoints: written,
        })
    }

    pub fn save_checkpoint(&mut self) -> Result<Option<PathBuf>> {
        let Some(dir) = self.run_dir.clone() else { return Ok(None) };
        let path = dir.join("checkpoints").join(format!("ckpt_{:010}.json", self.env_steps));
        self.checkpoint().save(&path)?;
        if let Some(s) = &mut self.sink {
            s.flush()?;
        }
        Ok(Some(path))
    }
}

/// Runs a full training job, resuming from `resume` when given.
pub fn run_training(config: TrainConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, run_dir.to_path_buf())?,
        None => Trainer::new(config, Some(run_dir.to_path_buf()))?,
    };
    trainer.run()
}
