//! Teammate policies, the pool of teammate groups and trajectory collection.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crp::ClusterRegistry;
use crate::env::{
    Action, EnvKind, EnvState, FixedTeammates, OpenEnv, OpenEnvConfig, Pos, SuddenChangeDist, TeammateSource,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::tape::{ParamStore, Tape};

/// Trajectories kept per group before the oldest are evicted.
pub const BUFFER_CAPACITY: usize = 512;

/// Hand-written behaviour families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Walks to the closest food and loads it.
    NearestFood,
    /// Goes for the highest-level food.
    HighestFood,
    /// Uniformly random actions.
    RandomWalker,
    /// Trails the closest other agent and loads whenever next to food.
    Follower,
    /// Moves straight at the prey.
    DirectChaser,
    /// Aims for the side of the prey opposite the nearest controllable predator.
    Flanker,
    /// Mostly idles, sometimes chases.
    Lazy,
    /// Uniformly random moves.
    RandomMover,
}

impl Archetype {
    pub fn for_env(kind: EnvKind) -> &'static [Archetype] {
        match kind {
            EnvKind::Lbf => &[Archetype::NearestFood, Archetype::HighestFood, Archetype::RandomWalker, Archetype::Follower],
            EnvKind::PredatorPrey => {
                &[Archetype::DirectChaser, Archetype::Flanker, Archetype::Lazy, Archetype::RandomMover]
            }
        }
    }

    pub fn env_kind(self) -> EnvKind {
        match self {
            Archetype::NearestFood | Archetype::HighestFood | Archetype::RandomWalker | Archetype::Follower => {
                EnvKind::Lbf
            }
            _ => EnvKind::PredatorPrey,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::NearestFood => "nearest_food",
            Archetype::HighestFood => "highest_food",
            Archetype::RandomWalker => "random_walker",
            Archetype::Follower => "follower",
            Archetype::DirectChaser => "direct_chaser",
            Archetype::Flanker => "flanker",
            Archetype::Lazy => "lazy",
            Archetype::RandomMover => "random_mover",
        }
    }
}

/// Scripted controller acting on the full world state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub archetype: Archetype,
    /// Probability of replacing the scripted choice with a uniform action.
    pub noise: f64,
}

/// Greedy Q-network over local observations, trained by self-play.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub store: ParamStore,
    pub net: Mlp,
    pub n_actions: usize,
}

impl LearnedPolicy {
    fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("obs row"));
        let q = self.net.forward(&mut tape, &self.store, x);
        tape.value(q).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TeammatePolicy {
    Scripted(ScriptedPolicy),
    Learned(LearnedPolicy),
}

impl TeammatePolicy {
    pub fn scripted(archetype: Archetype, noise: f64) -> Self {
        TeammatePolicy::Scripted(ScriptedPolicy { archetype, noise })
    }

    /// Clears per-episode memory. Current policies are memoryless.
    pub fn reset(&mut self) {}

    /// Action of entity `me` given the world state and its local observation.
    pub fn act<R: Rng + ?Sized>(
        &self,
        cfg: &OpenEnvConfig,
        state: &EnvState,
        me: usize,
        obs: &[f64],
        rng: &mut R,
    ) -> usize {
        match self {
            TeammatePolicy::Scripted(p) => {
                if p.noise > 0.0 && rng.random::<f64>() < p.noise {
                    return rng.random_range(0..cfg.n_actions());
                }
                scripted_action(p.archetype, cfg, state, me, rng)
            }
            TeammatePolicy::Learned(p) => argmax_first(&p.q_values(obs)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TeammatePolicy::Scripted(p) => p.archetype.name().to_string(),
            TeammatePolicy::Learned(_) => "learned".to_string(),
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn blocked(cfg: &OpenEnvConfig, state: &EnvState, me: usize, p: Pos) -> bool {
    if !p.in_grid(cfg.grid_size) || state.obstacles.contains(&p) {
        return true;
    }
    match cfg.env_kind {
        EnvKind::Lbf => {
            state.foods.iter().any(|f| !f.collected && f.pos == p)
                || state.entities.iter().enumerate().any(|(j, e)| j != me && e.active && e.pos == p)
        }
        EnvKind::PredatorPrey => false,
    }
}

/// Greedy move shrinking Manhattan distance to `goal`, larger axis first.
fn step_toward(cfg: &OpenEnvConfig, state: &EnvState, me: usize, goal: Pos) -> Action {
    step_toward_by(cfg, state, me, goal, false)
}

/// Like [`step_toward`] but `smaller_first` closes the smaller gap first.
fn step_toward_by(cfg: &OpenEnvConfig, state: &EnvState, me: usize, goal: Pos, smaller_first: bool) -> Action {
    let from = state.entities[me].pos;
    let dr = goal.row - from.row;
    let dc = goal.col - from.col;
    let vertical = if dr < 0 { Action::North } else { Action::South };
    let horizontal = if dc < 0 { Action::West } else { Action::East };
    let mut order = Vec::with_capacity(2);
    let rows_first = if smaller_first { dr != 0 && (dr.abs() <= dc.abs() || dc == 0) } else { dr.abs() >= dc.abs() };
    if rows_first {
        if dr != 0 {
            order.push(vertical);
        }
        if dc != 0 {
            order.push(horizontal);
        }
    } else {
        if dc != 0 {
            order.push(horizontal);
        }
        if dr != 0 {
            order.push(vertical);
        }
    }
    for a in order {
        let to = from.offset(a.delta());
        if to == goal || !blocked(cfg, state, me, to) {
            return a;
        }
    }
    Action::Noop
}

fn scripted_action<R: Rng + ?Sized>(
    arch: Archetype,
    cfg: &OpenEnvConfig,
    state: &EnvState,
    me: usize,
    rng: &mut R,
) -> usize {
    let pos = state.entities[me].pos;
    let foods: Vec<_> = state.foods.iter().filter(|f| !f.collected).collect();
    let a = match arch {
        Archetype::NearestFood | Archetype::HighestFood => {
            let target = if arch == Archetype::NearestFood {
                foods.iter().min_by_key(|f| pos.manhattan(f.pos))
            } else {
                foods.iter().min_by_key(|f| (std::cmp::Reverse(f.level), pos.manhattan(f.pos)))
            };
            match target {
                Some(f) if pos.manhattan(f.pos) == 1 => Action::Load,
                Some(f) => step_toward(cfg, state, me, f.pos),
                None => Action::Noop,
            }
        }
        Archetype::Follower => {
            if foods.iter().any(|f| pos.manhattan(f.pos) == 1) {
                Action::Load
            } else {
                let leader = state
                    .entities
                    .iter()
                    .enumerate()
                    .filter(|(j, e)| *j != me && e.active)
                    .min_by_key(|(_, e)| pos.manhattan(e.pos));
                match leader {
                    Some((_, e)) if pos.manhattan(e.pos) > 1 => step_toward(cfg, state, me, e.pos),
                    _ => Action::Noop,
                }
            }
        }
        Archetype::RandomWalker | Archetype::RandomMover => return rng.random_range(0..cfg.n_actions()),
        Archetype::DirectChaser => match state.prey {
            Some(p) => step_toward(cfg, state, me, p),
            None => Action::Noop,
        },
        Archetype::Flanker => match state.prey {
            Some(p) => {
                let anchor = state.entities[..cfg.n_controllable].iter().map(|e| e.pos).min_by_key(|q| q.manhattan(p));
                let goal = anchor
                    .map(|q| {
                        let g = p.offset(((p.row - q.row).signum(), (p.col - q.col).signum()));
                        if g.in_grid(cfg.grid_size) && !state.obstacles.contains(&g) {
                            g
                        } else {
                            p
                        }
                    })
                    .unwrap_or(p);
                if pos == goal {
                    step_toward(cfg, state, me, p)
                } else {
                    step_toward_by(cfg, state, me, goal, true)
                }
            }
            None => Action::Noop,
        },
        Archetype::Lazy => {
            if rng.random::<f64>() < 0.6 {
                Action::Noop
            } else {
                match state.prey {
                    Some(p) => step_toward(cfg, state, me, p),
                    None => Action::Noop,
                }
            }
        }
    };
    a as usize
}

/// One recorded episode.
///
/// Per-step vectors have length `T`; `states` and `obs` carry the extra
/// terminal entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub group_id: usize,
    pub cluster_id: Option<usize>,
    pub states: Vec<Vec<f64>>,
    pub obs: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<usize>>,
    /// Actions of every entity; `None` for absent teammates.
    pub joint_actions: Vec<Vec<Option<usize>>>,
    pub teammate_obs: Vec<Vec<Vec<f64>>>,
    pub teammate_mask: Vec<Vec<bool>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Whether the teammate policy changed after step `t`.
    pub changes: Vec<bool>,
    /// Group driving the teammates at step `t`.
    pub active_groups: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Decision-maker for the controllable agents.
pub trait JointPolicy {
    fn begin_episode(&mut self, n_agents: usize);
    fn act(&mut self, obs: &[Vec<f64>], state: &[f64], rng: &mut dyn RngCore) -> Result<Vec<usize>>;
}

/// Uniformly random controllable agents.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPartner {
    pub n_actions: usize,
}

impl JointPolicy for UniformPartner {
    fn begin_episode(&mut self, _n_agents: usize) {}

    fn act(&mut self, obs: &[Vec<f64>], _state: &[f64], rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        Ok(obs.iter().map(|_| rng.random_range(0..self.n_actions)).collect())
    }
}

/// Plays one episode and records it.
pub fn run_episode(
    cfg: &OpenEnvConfig,
    source: &dyn TeammateSource,
    partner: &mut dyn JointPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let (mut env, obs0) = OpenEnv::reset(cfg, source, rng)?;
    partner.begin_episode(cfg.n_controllable);
    let mut traj = Trajectory {
        group_id: env.sched.active_group,
        cluster_id: None,
        states: vec![env.global_state()],
        obs: vec![obs0],
        actions: Vec::new(),
        joint_actions: Vec::new(),
        teammate_obs: Vec::new(),
        teammate_mask: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        changes: Vec::new(),
        active_groups: Vec::new(),
    };
    loop {
        let obs = traj.obs.last().expect("obs");
        let state = traj.states.last().expect("state");
        let actions = partner.act(obs, state, rng)?;
        let mask = env.teammate_mask();
        let group = env.sched.active_group;
        let out = env.step(&actions, source, rng)?;
        traj.actions.push(actions);
        traj.joint_actions.push(out.joint_actions);
        traj.teammate_obs.push(out.teammate_obs);
        traj.teammate_mask.push(mask);
        traj.rewards.push(out.reward);
        traj.dones.push(out.done);
        traj.changes.push(out.changed);
        traj.active_groups.push(group);
        traj.obs.push(out.obs);
        traj.states.push(env.global_state());
        if out.done {
            break;
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeta {
    pub group_id: usize,
    pub env_kind: EnvKind,
    /// Human-readable family label (archetype name or `learned`).
    pub family: String,
    pub seed: u64,
    pub cluster_id: Option<usize>,
    pub embedding: Option<Vec<f64>>,
}

/// One teammate policy plus the trajectories collected with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeammateGroup {
    pub meta: GroupMeta,
    pub policy: TeammatePolicy,
    pub buffer: VecDeque<Trajectory>,
}

impl TeammateGroup {
    pub fn id(&self) -> usize {
        self.meta.group_id
    }

    pub fn push_trajectory(&mut self, traj: Trajectory) {
        if self.buffer.len() == BUFFER_CAPACITY {
            self.buffer.pop_front();
        }
        self.buffer.push_back(traj);
    }
}

/// Ingredients for a new group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupRecipe {
    Scripted { archetype: Archetype, noise: f64 },
    SelfPlay { steps: usize },
}

/// All teammate groups generated so far. Group ids start at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeammatePool {
    pub env_kind: EnvKind,
    pub groups: Vec<TeammateGroup>,
    pub next_id: usize,
}

impl TeammatePool {
    pub fn new(env_kind: EnvKind) -> Self {
        Self { env_kind, groups: Vec::new(), next_id: 1 }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TeammateGroup> {
        self.groups.iter().find(|g| g.meta.group_id == id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut TeammateGroup> {
        self.groups.iter_mut().find(|g| g.meta.group_id == id)
    }

    pub fn add(&mut self, policy: TeammatePolicy, family: String, seed: u64) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.groups.push(TeammateGroup {
            meta: GroupMeta { group_id: id, env_kind: self.env_kind, family, seed, cluster_id: None, embedding: None },
            policy,
            buffer: VecDeque::new(),
        });
        id
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pool.json"), serde_json::to_vec_pretty(&(self.env_kind, self.next_id))?)?;
        for g in &self.groups {
            let gdir = dir.join(format!("group_{}", g.meta.group_id));
            fs::create_dir_all(&gdir)?;
            fs::write(gdir.join("policy.json"), serde_json::to_vec(&g.policy)?)?;
            fs::write(gdir.join("meta.json"), serde_json::to_vec_pretty(&g.meta)?)?;
            let mut w = BufWriter::new(fs::File::create(gdir.join("trajectories.jsonl"))?);
            for t in &g.buffer {
                serde_json::to_writer(&mut w, t)?;
                std::io::Write::write_all(&mut w, b"\n")?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (env_kind, next_id): (EnvKind, usize) = serde_json::from_slice(&fs::read(dir.join("pool.json"))?)?;
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_prefix("group_").and_then(|s| s.parse::<usize>().ok()) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        let mut groups = Vec::with_capacity(ids.len());
        for id in ids {
            let gdir = dir.join(format!("group_{id}"));
            let policy: TeammatePolicy = serde_json::from_slice(&fs::read(gdir.join("policy.json"))?)?;
            let meta: GroupMeta = serde_json::from_slice(&fs::read(gdir.join("meta.json"))?)?;
            if meta.env_kind != env_kind {
                return Err(Error::Config(format!("group {id} belongs to a different environment")));
            }
            let mut buffer = VecDeque::new();
            for line in BufReader::new(fs::File::open(gdir.join("trajectories.jsonl"))?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    buffer.push_back(serde_json::from_str(&line)?);
                }
            }
            groups.push(TeammateGroup { meta, policy, buffer });
        }
        Ok(Self { env_kind, groups, next_id })
    }
}

/// Draws uniformly over every group in the pool.
impl TeammateSource for TeammatePool {
    fn draw(&self, rng: &mut dyn RngCore) -> (usize, TeammatePolicy) {
        let g = self.groups.choose(rng).expect("pool must not be empty");
        (g.meta.group_id, g.policy.clone())
    }
}

/// Builds a policy from the recipe and registers it in the pool.
pub fn generate_group(
    pool: &mut TeammatePool,
    recipe: GroupRecipe,
    env: &OpenEnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let seed: u64 = rng.random();
    match recipe {
        GroupRecipe::Scripted { archetype, noise } => {
            if archetype.env_kind() != pool.env_kind {
                return Err(Error::InvalidArgument(format!("{} does not fit this environment", archetype.name())));
            }
            if !(0.0..=1.0).contains(&noise) {
                return Err(Error::InvalidArgument("noise must lie in [0, 1]".into()));
            }
            Ok(pool.add(TeammatePolicy::scripted(archetype, noise), archetype.name().to_string(), seed))
        }
        GroupRecipe::SelfPlay { steps } => {
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            let policy = train_self_play(env, steps, &mut local)?;
            Ok(pool.add(TeammatePolicy::Learned(policy), "learned".to_string(), seed))
        }
    }
}

struct Transition {
    obs: Vec<f64>,
    action: usize,
    reward: f64,
    next: Vec<f64>,
    done: bool,
}

/// Short independent-learner self-play: every agent, teammates included,
/// runs a snapshot of the same Q-network.
pub fn train_self_play(cfg: &OpenEnvConfig, steps: usize, rng: &mut ChaCha8Rng) -> Result<LearnedPolicy> {
    let mut cfg = cfg.clone();
    cfg.change_dist = SuddenChangeDist::never();
    let n_actions = cfg.n_actions();
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, "sp", &[cfg.obs_dim(), 64, n_actions], Activation::Relu, rng);
    let mut opt = Adam::new(&store, 1e-3, Some(10.0));
    let mut policy = LearnedPolicy { store, net, n_actions };
    let mut target = policy.clone();
    let mut replay: VecDeque<Transition> = VecDeque::new();
    let mut done_steps = 0;
    while done_steps < steps {
        let source = FixedTeammates { group_id: 0, policy: TeammatePolicy::Learned(target.clone()) };
        let (mut env, mut obs) = OpenEnv::reset(&cfg, &source, rng)?;
        loop {
            let eps = (1.0 - done_steps as f64 / steps.max(1) as f64).max(0.05);
            let actions: Vec<usize> = obs
                .iter()
                .map(|o| {
                    if rng.random::<f64>() < eps {
                        rng.random_range(0..n_actions)
                    } else {
                        argmax_first(&policy.q_values(o))
                    }
                })
                .collect();
            let out = env.step(&actions, &source, rng)?;
            for (i, o) in obs.iter().enumerate() {
                replay.push_back(Transition {
                    obs: o.clone(),
                    action: actions[i],
                    reward: out.reward,
                    next: out.obs[i].clone(),
                    done: out.done,
                });
            }
            while replay.len() > 5000 {
                replay.pop_front();
            }
            done_steps += 1;
            if replay.len() >= 32 {
                let batch: Vec<&Transition> = (0..32).map(|_| &replay[rng.random_range(0..replay.len())]).collect();
                let d = cfg.obs_dim();
                let next = Array2::from_shape_fn((32, d), |(r, c)| batch[r].next[c]);
                let mut tt = Tape::new();
                let nx = tt.constant(next);
                let nq = target.net.forward(&mut tt, &target.store, nx);
                let nqv = tt.value(nq).clone();
                let y: Vec<f64> = batch
                    .iter()
                    .enumerate()
                    .map(|(r, t)| {
                        let m = nqv.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        t.reward + if t.done { 0.0 } else { cfg.gamma * m }
                    })
                    .collect();
                let mut tape = Tape::new();
                let x = tape.constant(Array2::from_shape_fn((32, d), |(r, c)| batch[r].obs[c]));
                let q = policy.net.forward(&mut tape, &policy.store, x);
                let idx: Vec<usize> = batch.iter().map(|t| t.action).collect();
                let chosen = tape.gather(q, &idx);
                let yv = tape.constant(Array2::from_shape_vec((32, 1), y).expect("targets"));
                let diff = tape.sub(chosen, yv);
                let sq = tape.square(diff);
                let loss = tape.mean(sq);
                let grads = tape.backward(loss);
                opt.apply(&mut policy.store, &grads);
                if !policy.store.all_finite() {
                    return Err(Error::NonFinite("self-play teammate parameters".into()));
                }
            }
            if done_steps % 200 == 0 {
                target = policy.clone();
            }
            obs = out.obs;
            if out.done || done_steps >= steps {
                break;
            }
        }
    }
    Ok(policy)
}

/// Rolls out `count` stationary episodes with the group's policy and appends
/// them to the group's buffer.
pub fn collect_trajectories(
    pool: &mut TeammatePool,
    group_id: usize,
    env: &OpenEnvConfig,
    count: usize,
    partner: &mut dyn JointPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    let group = pool.get(group_id).ok_or_else(|| Error::InvalidArgument(format!("no group {group_id}")))?;
    let mut cfg = env.clone();
    cfg.change_dist = SuddenChangeDist::never();
    let source = FixedTeammates { group_id, policy: group.policy.clone() };
    let cluster = group.meta.cluster_id;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut t = run_episode(&cfg, &source, partner, rng)?;
        t.cluster_id = cluster;
        out.push(t);
    }
    let group = pool.get_mut(group_id).expect("checked above");
    for t in &out {
        group.push_trajectory(t.clone());
    }
    Ok(out)
}

/// Picks a cluster uniformly, then a member group uniformly.
pub fn sample_training_group<R: Rng + ?Sized>(registry: &ClusterRegistry, rng: &mut R) -> Result<usize> {
    let nonempty: Vec<_> = registry.clusters.iter().filter(|c| !c.members.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::Empty("cluster registry"));
    }
    let c = nonempty[rng.random_range(0..nonempty.len())];
    Ok(c.members[rng.random_range(0..c.members.len())])
}

/// Random reset states for comparing policies on identical inputs.
///
/// The first teammate slot is always active.
pub fn probe_states(cfg: &OpenEnvConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<EnvState>> {
    let dummy = FixedTeammates { group_id: 0, policy: TeammatePolicy::scripted(Archetype::for_env(cfg.env_kind)[0], 0.0) };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (env, _) = OpenEnv::reset(cfg, &dummy, rng)?;
        let mut s = env.state;
        s.entities[cfg.n_controllable].active = true;
        let probe = s.entities[cfg.n_controllable].pos;
        let clash = s.entities.iter().enumerate().any(|(j, e)| j != cfg.n_controllable && e.active && e.pos == probe);
        if !clash {
            out.push(s);
        }
    }
    Ok(out)
}
