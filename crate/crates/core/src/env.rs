//! Open multi-agent gridworlds whose uncontrolled teammates can be swapped
//! mid-episode.
//!
//! Entity layout is fixed per config: controllable agents first, then
//! `max_teammates` teammate slots. Inactive slots keep a body in the state
//! but are invisible and do not interact until the scheduler activates them.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teammates::TeammatePolicy;

/// Waiting time used when the change distribution never fires.
pub const WAIT_NEVER: i64 = i64::MAX;

pub const LBF_ACTIONS: usize = 6;
pub const PP_ACTIONS: usize = 5;

/// Discrete action shared by both gridworlds. Predator-prey has no `Load`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Noop = 0,
    North = 1,
    South = 2,
    West = 3,
    East = 4,
    Load = 5,
}

impl Action {
    pub fn from_index(i: usize) -> Option<Action> {
        Some(match i {
            0 => Action::Noop,
            1 => Action::North,
            2 => Action::South,
            3 => Action::West,
            4 => Action::East,
            5 => Action::Load,
            _ => return None,
        })
    }

    /// Row/column displacement.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::North => (-1, 0),
            Action::South => (1, 0),
            Action::West => (0, -1),
            Action::East => (0, 1),
            Action::Noop | Action::Load => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Lbf,
    PredatorPrey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    DiscreteUniform,
    Never,
}

/// Distribution of waiting times between teammate changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuddenChangeDist {
    pub kind: ChangeKind,
    pub low: i64,
    pub high: i64,
}

impl SuddenChangeDist {
    pub fn never() -> Self {
        Self { kind: ChangeKind::Never, low: 1, high: 1 }
    }

    pub fn uniform(low: i64, high: i64) -> Result<Self> {
        let d = Self { kind: ChangeKind::DiscreteUniform, low, high };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ChangeKind::DiscreteUniform && (self.low < 1 || self.high < self.low) {
            return Err(Error::Config(format!("bad waiting-time range U[{}, {}]", self.low, self.high)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        match self.kind {
            ChangeKind::Never => WAIT_NEVER,
            ChangeKind::DiscreteUniform => rng.random_range(self.low..=self.high),
        }
    }

    /// Parses `stationary`, `never`, `U5-8` or `U[5,8]`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("stationary") || t.eq_ignore_ascii_case("never") {
            return Ok(Self::never());
        }
        let body = t
            .strip_prefix('U')
            .or_else(|| t.strip_prefix('u'))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown change distribution `{s}`")))?;
        let body = body.trim_start_matches('[').trim_end_matches(']');
        let (a, b) = body
            .split_once(['-', ','])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown change distribution `{s}`")))?;
        let low = a.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad bound in `{s}`")))?;
        let high = b.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad bound in `{s}`")))?;
        Self::uniform(low, high)
    }

    pub fn label(&self) -> String {
        match self.kind {
            ChangeKind::Never => "stationary".into(),
            ChangeKind::DiscreteUniform => format!("U[{},{}]", self.low, self.high),
        }
    }
}

fn default_n_foods() -> usize {
    3
}
fn default_max_level() -> u32 {
    3
}
fn default_obstacles() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenEnvConfig {
    pub n_controllable: usize,
    pub max_teammates: usize,
    pub grid_size: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub vision_range: usize,
    pub env_kind: EnvKind,
    pub change_dist: SuddenChangeDist,
    pub seed: u64,
    #[serde(default = "default_n_foods")]
    pub n_foods: usize,
    #[serde(default = "default_max_level")]
    pub max_agent_level: u32,
    #[serde(default = "default_obstacles")]
    pub n_obstacles: usize,
}

impl OpenEnvConfig {
    /// 6×6 foraging, two controllable agents, two teammate slots, three foods.
    pub fn lbf_default() -> Self {
        Self {
            n_controllable: 2,
            max_teammates: 2,
            grid_size: 6,
            horizon: 25,
            gamma: 0.99,
            vision_range: 1,
            env_kind: EnvKind::Lbf,
            change_dist: SuddenChangeDist::never(),
            seed: 0,
            n_foods: 3,
            max_agent_level: 3,
            n_obstacles: 0,
        }
    }

    /// Three predators (two controllable), one prey, two obstacles.
    pub fn pp_default() -> Self {
        Self {
            n_controllable: 2,
            max_teammates: 1,
            grid_size: 7,
            horizon: 25,
            gamma: 0.99,
            vision_range: 2,
            env_kind: EnvKind::PredatorPrey,
            change_dist: SuddenChangeDist::never(),
            seed: 0,
            n_foods: 0,
            max_agent_level: 1,
            n_obstacles: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be >= 2".into()));
        }
        if self.n_controllable < 1 || self.max_teammates < 1 {
            return Err(Error::Config("need at least one controllable agent and one teammate slot".into()));
        }
        if self.env_kind == EnvKind::Lbf && (self.n_foods < 1 || self.max_agent_level < 1) {
            return Err(Error::Config("foraging needs foods and positive levels".into()));
        }
        self.change_dist.validate()
    }

    pub fn n_entities(&self) -> usize {
        self.n_controllable + self.max_teammates
    }

    pub fn n_actions(&self) -> usize {
        match self.env_kind {
            EnvKind::Lbf => LBF_ACTIONS,
            EnvKind::PredatorPrey => PP_ACTIONS,
        }
    }

    pub fn obs_dim(&self) -> usize {
        let others = self.n_entities() - 1;
        match self.env_kind {
            EnvKind::Lbf => {
                let side = 2 * self.vision_range + 1;
                side * side * 3 + 3 + 4 * others
            }
            EnvKind::PredatorPrey => 4 + 3 + 3 * self.n_obstacles + 3 * others,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.env_kind {
            EnvKind::Lbf => 4 * self.n_entities() + 4 * self.n_foods + 1,
            EnvKind::PredatorPrey => 5 * self.n_entities() + 2 + 2 * self.n_obstacles + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub row: i32,
    pub col: i32,
}

impl Pos {
    pub fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.row - other.row).abs() + (self.col - other.col).abs()
    }

    pub fn chebyshev(self, other: Pos) -> i32 {
        (self.row - other.row).abs().max((self.col - other.col).abs())
    }

    pub fn offset(self, (dr, dc): (i32, i32)) -> Pos {
        Pos::new(self.row + dr, self.col + dc)
    }

    pub fn in_grid(self, side: usize) -> bool {
        self.row >= 0 && self.col >= 0 && (self.row as usize) < side && (self.col as usize) < side
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub pos: Pos,
    pub level: u32,
    pub active: bool,
    /// Last displacement (predator-prey only).
    pub velocity: (i32, i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Food {
    pub pos: Pos,
    pub level: u32,
    pub collected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub entities: Vec<Entity>,
    pub foods: Vec<Food>,
    pub prey: Option<Pos>,
    pub obstacles: Vec<Pos>,
    pub step_index: usize,
    pub done: bool,
}

impl EnvState {
    pub fn total_food_level(&self) -> u32 {
        self.foods.iter().map(|f| f.level).sum()
    }

    pub fn all_collected(&self) -> bool {
        !self.foods.is_empty() && self.foods.iter().all(|f| f.collected)
    }

    fn occupied_by_active(&self, p: Pos) -> bool {
        self.entities.iter().any(|e| e.active && e.pos == p)
    }

    fn food_at(&self, p: Pos) -> Option<usize> {
        self.foods.iter().position(|f| !f.collected && f.pos == p)
    }
}

/// Which teammate slots are present and how long until the next change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub waiting_time: i64,
    /// Teammate slot indices in `0..max_teammates`, sorted.
    pub active_team: Vec<usize>,
    /// Pool id of the group whose policy currently drives the teammates.
    pub active_group: usize,
    /// Number of changes performed so far in this episode.
    pub changes: usize,
}

/// Supplies fresh teammate policies when the scheduler fires.
pub trait TeammateSource {
    fn draw(&self, rng: &mut dyn rand::RngCore) -> (usize, TeammatePolicy);
}

/// A source that always returns the same policy.
#[derive(Debug, Clone)]
pub struct FixedTeammates {
    pub group_id: usize,
    pub policy: TeammatePolicy,
}

impl TeammateSource for FixedTeammates {
    fn draw(&self, _rng: &mut dyn rand::RngCore) -> (usize, TeammatePolicy) {
        (self.group_id, self.policy.clone())
    }
}

/// Uniform non-empty subset of `0..slots`.
pub fn sample_team<R: Rng + ?Sized>(slots: usize, rng: &mut R) -> Vec<usize> {
    let n_subsets = (1u64 << slots) - 1;
    let mask = rng.random_range(1..=n_subsets);
    (0..slots).filter(|i| mask & (1 << i) != 0).collect()
}

/// Decrements the waiting time and resamples team and policy when it expires.
///
/// Returns the new schedule and, when a change fired, the replacement policy.
pub fn tick_schedule<R: rand::RngCore>(
    sched: &ScheduleState,
    dist: &SuddenChangeDist,
    max_teammates: usize,
    pool: &dyn TeammateSource,
    rng: &mut R,
) -> (ScheduleState, Option<TeammatePolicy>) {
    if dist.kind == ChangeKind::Never || sched.waiting_time == WAIT_NEVER {
        return (sched.clone(), None);
    }
    let mut next = sched.clone();
    next.waiting_time -= 1;
    if next.waiting_time > 0 {
        return (next, None);
    }
    next.waiting_time = dist.sample(rng);
    next.active_team = sample_team(max_teammates, rng);
    let (gid, policy) = pool.draw(rng);
    next.active_group = gid;
    next.changes += 1;
    (next, Some(policy))
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    /// Actions of every entity (controllable then teammate slots); inactive slots hold `None`.
    pub joint_actions: Vec<Option<usize>>,
    /// Teammate observations taken before the transition, one per slot.
    pub teammate_obs: Vec<Vec<f64>>,
    pub changed: bool,
}

/// Reward for collecting a food of `collected_level` out of all food levels.
pub fn lbf_reward(collected_level: u32, all_food_levels: &[u32]) -> Result<f64> {
    if all_food_levels.is_empty() {
        return Err(Error::Empty("food level list"));
    }
    let total: u32 = all_food_levels.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("food levels must be positive".into()));
    }
    Ok(collected_level as f64 / total as f64)
}

/// Builds an initial state and schedule.
pub fn reset<R: rand::RngCore>(
    config: &OpenEnvConfig,
    pool: &dyn TeammateSource,
    rng: &mut R,
) -> Result<(EnvState, Vec<Vec<f64>>, ScheduleState, TeammatePolicy)> {
    config.validate()?;
    let side = config.grid_size;
    let n_ent = config.n_entities();
    let needed = n_ent
        + match config.env_kind {
            EnvKind::Lbf => config.n_foods,
            EnvKind::PredatorPrey => 1 + config.n_obstacles,
        };
    if needed > side * side {
        return Err(Error::GridTooSmall { needed, side });
    }
    let mut cells: Vec<Pos> = (0..side)
        .flat_map(|r| (0..side).map(move |c| Pos::new(r as i32, c as i32)))
        .collect();
    cells.shuffle(rng);

    let team = sample_team(config.max_teammates, rng);
    let mut state = EnvState {
        entities: Vec::with_capacity(n_ent),
        foods: Vec::new(),
        prey: None,
        obstacles: Vec::new(),
        step_index: 0,
        done: false,
    };

    match config.env_kind {
        EnvKind::Lbf => {
            let levels: Vec<u32> = (0..n_ent).map(|_| rng.random_range(1..=config.max_agent_level)).collect();
            let mut sorted = levels.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            let cap: u32 = sorted.iter().take(3).sum();
            // foods first, on cells with a free neighbour
            let mut used = vec![false; cells.len()];
            let mut placed = 0;
            for (i, &p) in cells.iter().enumerate() {
                if placed == config.n_foods {
                    break;
                }
                let clash = state.foods.iter().any(|f: &Food| f.pos.chebyshev(p) <= 1);
                if clash {
                    continue;
                }
                state.foods.push(Food { pos: p, level: rng.random_range(1..=cap.max(1)), collected: false });
                used[i] = true;
                placed += 1;
            }
            if placed < config.n_foods {
                return Err(Error::GridTooSmall { needed, side });
            }
            let mut free = cells.iter().zip(&used).filter(|(_, u)| !**u).map(|(p, _)| *p);
            for (idx, &level) in levels.iter().enumerate() {
                let pos = free.next().ok_or(Error::GridTooSmall { needed, side })?;
                let active = idx < config.n_controllable || team.contains(&(idx - config.n_controllable));
                state.entities.push(Entity { pos, level, active, velocity: (0, 0) });
            }
        }
        EnvKind::PredatorPrey => {
            let mut it = cells.into_iter();
            for _ in 0..config.n_obstacles {
                state.obstacles.push(it.next().ok_or(Error::GridTooSmall { needed, side })?);
            }
            state.prey = Some(it.next().ok_or(Error::GridTooSmall { needed, side })?);
            for idx in 0..n_ent {
                let pos = it.next().ok_or(Error::GridTooSmall { needed, side })?;
                let active = idx < config.n_controllable || team.contains(&(idx - config.n_controllable));
                state.entities.push(Entity { pos, level: 1, active, velocity: (0, 0) });
            }
        }
    }

    let (gid, policy) = pool.draw(rng);
    let sched = ScheduleState {
        waiting_time: config.change_dist.sample(rng),
        active_team: team,
        active_group: gid,
        changes: 0,
    };
    let obs = (0..config.n_controllable).map(|i| observe(config, &state, i)).collect();
    Ok((state, obs, sched, policy))
}

/// Local observation of entity `agent` (controllable index or `n_controllable + slot`).
pub fn observe(config: &OpenEnvConfig, state: &EnvState, agent: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.obs_dim());
    let me = &state.entities[agent];
    let side = config.grid_size as i32;
    let norm = (config.grid_size.max(2) - 1) as f64;
    let vr = config.vision_range as i32;
    match config.env_kind {
        EnvKind::Lbf => {
            let lvl_norm = config.max_agent_level as f64;
            let food_norm = (3 * config.max_agent_level) as f64;
            for dr in -vr..=vr {
                for dc in -vr..=vr {
                    let p = me.pos.offset((dr, dc));
                    if !(p.row >= 0 && p.col >= 0 && p.row < side && p.col < side) {
                        out.extend_from_slice(&[1.0, 0.0, 0.0]);
                        continue;
                    }
                    let agent_level = if dr == 0 && dc == 0 {
                        0.0
                    } else {
                        state
                            .entities
                            .iter()
                            .find(|e| e.active && e.pos == p)
                            .map(|e| e.level as f64 / lvl_norm)
                            .unwrap_or(0.0)
                    };
                    let food_level =
                        state.food_at(p).map(|f| state.foods[f].level as f64 / food_norm).unwrap_or(0.0);
                    out.extend_from_slice(&[0.0, agent_level, food_level]);
                }
            }
            out.push(me.pos.row as f64 / norm);
            out.push(me.pos.col as f64 / norm);
            out.push(me.level as f64 / lvl_norm);
            for (j, other) in state.entities.iter().enumerate() {
                if j == agent {
                    continue;
                }
                if other.active && other.pos.chebyshev(me.pos) <= vr {
                    out.extend_from_slice(&[
                        1.0,
                        (other.pos.row - me.pos.row) as f64 / vr.max(1) as f64,
                        (other.pos.col - me.pos.col) as f64 / vr.max(1) as f64,
                        other.level as f64 / lvl_norm,
                    ]);
                } else {
                    out.extend_from_slice(&[0.0; 4]);
                }
            }
        }
        EnvKind::PredatorPrey => {
            out.push(me.pos.row as f64 / norm);
            out.push(me.pos.col as f64 / norm);
            out.push(me.velocity.0 as f64);
            out.push(me.velocity.1 as f64);
            let rel = |p: Pos, out: &mut Vec<f64>| {
                if p.chebyshev(me.pos) <= vr {
                    out.extend_from_slice(&[
                        1.0,
                        (p.row - me.pos.row) as f64 / vr.max(1) as f64,
                        (p.col - me.pos.col) as f64 / vr.max(1) as f64,
                    ]);
                } else {
                    out.extend_from_slice(&[0.0; 3]);
                }
            };
            match state.prey {
                Some(p) => rel(p, &mut out),
                None => out.extend_from_slice(&[0.0; 3]),
            }
            for &o in &state.obstacles {
                rel(o, &mut out);
            }
            for (j, other) in state.entities.iter().enumerate() {
                if j == agent {
                    continue;
                }
                if other.active {
                    rel(other.pos, &mut out);
                } else {
                    out.extend_from_slice(&[0.0; 3]);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), config.obs_dim());
    out
}

/// Flat global state vector used by the centralized components.
pub fn global_state(config: &OpenEnvConfig, state: &EnvState) -> Vec<f64> {
    let norm = (config.grid_size.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(config.state_dim());
    match config.env_kind {
        EnvKind::Lbf => {
            let lvl = config.max_agent_level as f64;
            for e in &state.entities {
                if e.active {
                    out.extend_from_slice(&[1.0, e.pos.row as f64 / norm, e.pos.col as f64 / norm, e.level as f64 / lvl]);
                } else {
                    out.extend_from_slice(&[0.0; 4]);
                }
            }
            let fl = (3 * config.max_agent_level) as f64;
            for f in &state.foods {
                out.extend_from_slice(&[
                    f.pos.row as f64 / norm,
                    f.pos.col as f64 / norm,
                    f.level as f64 / fl,
                    if f.collected { 1.0 } else { 0.0 },
                ]);
            }
        }
        EnvKind::PredatorPrey => {
            for e in &state.entities {
                if e.active {
                    out.extend_from_slice(&[
                        1.0,
                        e.pos.row as f64 / norm,
                        e.pos.col as f64 / norm,
                        e.velocity.0 as f64,
                        e.velocity.1 as f64,
                    ]);
                } else {
                    out.extend_from_slice(&[0.0; 5]);
                }
            }
            let p = state.prey.unwrap_or(Pos::new(0, 0));
            out.push(p.row as f64 / norm);
            out.push(p.col as f64 / norm);
            for o in &state.obstacles {
                out.push(o.row as f64 / norm);
                out.push(o.col as f64 / norm);
            }
        }
    }
    out.push(state.step_index as f64 / config.horizon as f64);
    debug_assert_eq!(out.len(), config.state_dim());
    out
}

/// A running episode: world state, schedule and the active teammate policy.
#[derive(Debug, Clone)]
pub struct OpenEnv {
    pub config: OpenEnvConfig,
    pub state: EnvState,
    pub sched: ScheduleState,
    pub policy: TeammatePolicy,
}

impl OpenEnv {
    pub fn reset<R: rand::RngCore>(
        config: &OpenEnvConfig,
        pool: &dyn TeammateSource,
        rng: &mut R,
    ) -> Result<(Self, Vec<Vec<f64>>)> {
        let (state, obs, sched, mut policy) = reset(config, pool, rng)?;
        policy.reset();
        Ok((Self { config: config.clone(), state, sched, policy }, obs))
    }

    pub fn observe(&self, agent: usize) -> Vec<f64> {
        observe(&self.config, &self.state, agent)
    }

    pub fn global_state(&self) -> Vec<f64> {
        global_state(&self.config, &self.state)
    }

    pub fn teammate_observations(&self) -> Vec<Vec<f64>> {
        let n = self.config.n_controllable;
        (0..self.config.max_teammates)
            .map(|slot| {
                if self.state.entities[n + slot].active {
                    self.observe(n + slot)
                } else {
                    vec![0.0; self.config.obs_dim()]
                }
            })
            .collect()
    }

    /// Presence flag per teammate slot.
    pub fn teammate_mask(&self) -> Vec<bool> {
        let n = self.config.n_controllable;
        (0..self.config.max_teammates).map(|s| self.state.entities[n + s].active).collect()
    }

    /// Advances one step; teammates act from the active policy and the
    /// scheduler ticks after the transition.
    pub fn step<R: rand::RngCore>(
        &mut self,
        actions: &[usize],
        pool: &dyn TeammateSource,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if self.state.done {
            return Err(Error::EpisodeDone);
        }
        let cfg = &self.config;
        if actions.len() != cfg.n_controllable {
            return Err(Error::InvalidArgument(format!(
                "expected {} actions, got {}",
                cfg.n_controllable,
                actions.len()
            )));
        }
        for (agent, &a) in actions.iter().enumerate() {
            if a >= cfg.n_actions() {
                return Err(Error::IllegalAction { agent, action: a, n_actions: cfg.n_actions() });
            }
        }
        let n = cfg.n_controllable;
        let teammate_obs = self.teammate_observations();
        let mut joint: Vec<Option<usize>> = actions.iter().map(|&a| Some(a)).collect();
        for slot in 0..cfg.max_teammates {
            if self.state.entities[n + slot].active {
                let a = self.policy.act(cfg, &self.state, n + slot, &teammate_obs[slot], rng);
                joint.push(Some(a.min(cfg.n_actions() - 1)));
            } else {
                joint.push(None);
            }
        }

        let reward = match cfg.env_kind {
            EnvKind::Lbf => lbf_transition(cfg, &mut self.state, &joint),
            EnvKind::PredatorPrey => pp_transition(cfg, &mut self.state, &joint, rng),
        };
        self.state.step_index += 1;
        self.state.done = self.state.step_index >= cfg.horizon || self.state.all_collected();

        let (sched, new_policy) = tick_schedule(&self.sched, &cfg.change_dist, cfg.max_teammates, pool, rng);
        let changed = new_policy.is_some();
        if let Some(mut p) = new_policy {
            p.reset();
            self.policy = p;
            apply_team(cfg, &mut self.state, &sched.active_team, rng);
        }
        self.sched = sched;

        let obs = (0..n).map(|i| self.observe(i)).collect();
        Ok(StepOutcome { obs, reward, done: self.state.done, joint_actions: joint, teammate_obs, changed })
    }
}

/// Activates exactly the slots in `team`, relocating bodies whose cell is taken.
fn apply_team<R: Rng + ?Sized>(cfg: &OpenEnvConfig, state: &mut EnvState, team: &[usize], rng: &mut R) {
    let n = cfg.n_controllable;
    for slot in 0..cfg.max_teammates {
        let idx = n + slot;
        let want = team.contains(&slot);
        if want && !state.entities[idx].active {
            let pos = state.entities[idx].pos;
            let blocked = |s: &EnvState, p: Pos| {
                s.occupied_by_active(p) || s.food_at(p).is_some() || s.obstacles.contains(&p) || s.prey == Some(p)
            };
            if blocked(state, pos) {
                let side = cfg.grid_size as i32;
                let free: Vec<Pos> = (0..side)
                    .flat_map(|r| (0..side).map(move |c| Pos::new(r, c)))
                    .filter(|&p| !blocked(state, p))
                    .collect();
                if let Some(&p) = free.choose(rng) {
                    state.entities[idx].pos = p;
                }
            }
            state.entities[idx].active = true;
            state.entities[idx].velocity = (0, 0);
        } else if !want {
            state.entities[idx].active = false;
        }
    }
}

fn lbf_transition(cfg: &OpenEnvConfig, state: &mut EnvState, joint: &[Option<usize>]) -> f64 {
    let side = cfg.grid_size;
    let n_ent = state.entities.len();
    // movement: targets must be free at the start of the step; contested cells block everyone
    let mut targets: Vec<Option<Pos>> = vec![None; n_ent];
    for (i, a) in joint.iter().enumerate() {
        let Some(a) = a.and_then(Action::from_index) else { continue };
        if !state.entities[i].active || a == Action::Noop || a == Action::Load {
            continue;
        }
        let to = state.entities[i].pos.offset(a.delta());
        if to.in_grid(side) && !state.occupied_by_active(to) && state.food_at(to).is_none() {
            targets[i] = Some(to);
        }
    }
    for i in 0..n_ent {
        if let Some(t) = targets[i] {
            let contested = targets.iter().enumerate().any(|(j, o)| j != i && *o == Some(t));
            if !contested {
                state.entities[i].pos = t;
            }
        }
    }
    // loading
    let levels: Vec<u32> = state.foods.iter().map(|f| f.level).collect();
    let total: u32 = levels.iter().sum();
    let mut reward = 0.0;
    for fi in 0..state.foods.len() {
        if state.foods[fi].collected {
            continue;
        }
        let fpos = state.foods[fi].pos;
        let loaders: u32 = state
            .entities
            .iter()
            .zip(joint)
            .filter(|(e, a)| e.active && **a == Some(Action::Load as usize) && e.pos.manhattan(fpos) == 1)
            .map(|(e, _)| e.level)
            .sum();
        if loaders > 0 && loaders >= state.foods[fi].level {
            state.foods[fi].collected = true;
            reward += state.foods[fi].level as f64 / total as f64;
        }
    }
    reward
}

/// Reward per predator landing on the prey cell.
pub const PP_CATCH_REWARD: f64 = 10.0;

fn pp_transition<R: Rng + ?Sized>(
    cfg: &OpenEnvConfig,
    state: &mut EnvState,
    joint: &[Option<usize>],
    rng: &mut R,
) -> f64 {
    let side = cfg.grid_size;
    for (i, a) in joint.iter().enumerate() {
        let e = &mut state.entities[i];
        e.velocity = (0, 0);
        let Some(a) = a.and_then(Action::from_index) else { continue };
        if !e.active {
            continue;
        }
        let to = e.pos.offset(a.delta());
        if to != e.pos && to.in_grid(side) && !state.obstacles.contains(&to) {
            e.velocity = a.delta();
            e.pos = to;
        }
    }
    let Some(prey) = state.prey else { return 0.0 };
    let hits = state.entities.iter().filter(|e| e.active && e.pos == prey).count();
    let reward = PP_CATCH_REWARD * hits as f64;

    // prey flees: maximise distance to the nearest active predator
    let preds: Vec<Pos> = state.entities.iter().filter(|e| e.active).map(|e| e.pos).collect();
    let score = |p: Pos| preds.iter().map(|q| q.manhattan(p)).min().unwrap_or(0);
    let mut best: Vec<Pos> = Vec::new();
    let mut best_score = i32::MIN;
    for a in [Action::Noop, Action::North, Action::South, Action::West, Action::East] {
        let to = prey.offset(a.delta());
        if !to.in_grid(side) || state.obstacles.contains(&to) || preds.contains(&to) {
            continue;
        }
        let s = score(to);
        if s > best_score {
            best_score = s;
            best.clear();
        }
        if s == best_score {
            best.push(to);
        }
    }
    if let Some(&to) = best.choose(rng) {
        state.prey = Some(to);
    }
    reward
}

/// Text rendering of the grid (`A` controllable, `T` teammate, digits food levels).
pub fn render(config: &OpenEnvConfig, state: &EnvState) -> String {
    let side = config.grid_size;
    let mut grid = vec![vec!['.'; side]; side];
    for o in &state.obstacles {
        grid[o.row as usize][o.col as usize] = '#';
    }
    for f in state.foods.iter().filter(|f| !f.collected) {
        grid[f.pos.row as usize][f.pos.col as usize] = char::from_digit(f.level.min(9), 10).unwrap_or('F');
    }
    if let Some(p) = state.prey {
        grid[p.row as usize][p.col as usize] = 'P';
    }
    for (i, e) in state.entities.iter().enumerate().filter(|(_, e)| e.active) {
        grid[e.pos.row as usize][e.pos.col as usize] = if i < config.n_controllable { 'A' } else { 'T' };
    }
    grid.into_iter().map(|r| r.into_iter().collect::<String>()).collect::<Vec<_>>().join("\n")
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Option<usize>>,
    pub reward: f64,
    pub done: bool,
    pub active_team: Vec<usize>,
    pub cluster_id: Option<usize>,
}

/// Writes records as line-delimited JSON.
pub fn write_step_records<W: Write>(mut out: W, records: &[StepRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teammates::{Archetype, TeammatePolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idle() -> FixedTeammates {
        FixedTeammates { group_id: 1, policy: TeammatePolicy::scripted(Archetype::NearestFood, 0.0) }
    }

    fn entity(r: i32, c: i32, level: u32) -> Entity {
        Entity { pos: Pos::new(r, c), level, active: true, velocity: (0, 0) }
    }

    fn lbf_state(entities: Vec<Entity>, foods: Vec<Food>) -> EnvState {
        EnvState { entities, foods, prey: None, obstacles: Vec::new(), step_index: 0, done: false }
    }

    #[test]
    fn dims_match_config() {
        let c = OpenEnvConfig::lbf_default();
        assert_eq!((c.obs_dim(), c.state_dim(), c.n_actions()), (42, 29, 6));
        let p = OpenEnvConfig::pp_default();
        assert_eq!((p.obs_dim(), p.state_dim(), p.n_actions()), (19, 22, 5));
    }

    #[test]
    fn reset_builds_valid_lbf_state() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (state, obs, sched, _) = reset(&cfg, &idle(), &mut rng).unwrap();
            assert_eq!(state.foods.len(), 3);
            assert!(state.foods.iter().all(|f| !f.collected));
            for (i, a) in state.foods.iter().enumerate() {
                for b in &state.foods[i + 1..] {
                    assert!(a.pos.chebyshev(b.pos) > 1);
                }
                assert!(state.entities.iter().all(|e| e.pos != a.pos));
            }
            let mut levels: Vec<u32> = state.entities.iter().map(|e| e.level).collect();
            levels.sort_unstable_by(|a, b| b.cmp(a));
            let cap: u32 = levels.iter().take(3).sum();
            assert!(state.foods.iter().all(|f| f.level >= 1 && f.level <= cap));
            assert!(!sched.active_team.is_empty());
            assert_eq!(sched.waiting_time, WAIT_NEVER);
            assert_eq!(obs.len(), 2);
            assert!(obs.iter().all(|o| o.len() == cfg.obs_dim()));
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = OpenEnvConfig::lbf_default();
        let a = reset(&cfg, &idle(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = reset(&cfg, &idle(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.0, a.1, a.2), (b.0, b.1, b.2));
    }

    #[test]
    fn too_small_grid_is_rejected() {
        let mut cfg = OpenEnvConfig::lbf_default();
        cfg.grid_size = 2;
        assert!(matches!(reset(&cfg, &idle(), &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn reward_examples() {
        assert!((lbf_reward(2, &[2, 3, 4]).unwrap() - 2.0 / 9.0).abs() < 1e-15);
        assert_eq!(lbf_reward(0, &[2, 3, 4]).unwrap(), 0.0);
        assert!(lbf_reward(1, &[]).is_err());
        let total: f64 = [2, 3, 4].iter().map(|&l| lbf_reward(l, &[2, 3, 4]).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_load_collects_food() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut s = lbf_state(
            vec![entity(2, 1, 1), entity(2, 3, 2), entity(5, 5, 1), entity(0, 5, 1)],
            vec![
                Food { pos: Pos::new(2, 2), level: 3, collected: false },
                Food { pos: Pos::new(5, 0), level: 2, collected: false },
                Food { pos: Pos::new(0, 0), level: 4, collected: false },
            ],
        );
        let load = Some(Action::Load as usize);
        let r = lbf_transition(&cfg, &mut s, &[load, load, Some(0), Some(0)]);
        assert!((r - 3.0 / 9.0).abs() < 1e-15);
        assert!(s.foods[0].collected);
        // a lone agent below the food level cannot load
        let mut s2 = s.clone();
        s2.foods[0].collected = false;
        let r = lbf_transition(&cfg, &mut s2, &[load, Some(0), Some(0), Some(0)]);
        assert_eq!(r, 0.0);
        assert!(!s2.foods[0].collected);
    }

    #[test]
    fn noop_leaves_state_unchanged() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut env, _) = OpenEnv::reset(&cfg, &idle(), &mut rng).unwrap();
        for e in env.state.entities.iter_mut().skip(2) {
            e.active = false;
        }
        let before = env.state.clone();
        let out = env.step(&[0, 0], &idle(), &mut rng).unwrap();
        assert_eq!(out.reward, 0.0);
        let mut expect = before;
        expect.step_index = 1;
        assert_eq!(env.state, expect);
    }

    #[test]
    fn contested_cell_blocks_both() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut s = lbf_state(
            vec![entity(1, 0, 1), entity(1, 2, 1), entity(5, 5, 1), entity(4, 5, 1)],
            vec![Food { pos: Pos::new(5, 0), level: 1, collected: false }],
        );
        lbf_transition(&cfg, &mut s, &[Some(Action::East as usize), Some(Action::West as usize), None, None]);
        assert_eq!(s.entities[0].pos, Pos::new(1, 0));
        assert_eq!(s.entities[1].pos, Pos::new(1, 2));
    }

    #[test]
    fn step_errors() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut env, _) = OpenEnv::reset(&cfg, &idle(), &mut rng).unwrap();
        assert!(matches!(env.step(&[6, 0], &idle(), &mut rng), Err(Error::IllegalAction { .. })));
        assert!(env.step(&[0], &idle(), &mut rng).is_err());
        while !env.state.done {
            env.step(&[0, 0], &idle(), &mut rng).unwrap();
        }
        assert!(env.state.step_index <= cfg.horizon);
        assert!(matches!(env.step(&[0, 0], &idle(), &mut rng), Err(Error::EpisodeDone)));
    }

    #[test]
    fn predator_on_prey_scores() {
        let cfg = OpenEnvConfig::pp_default();
        let mut s = EnvState {
            entities: vec![entity(3, 2, 1), entity(3, 4, 1), entity(0, 0, 1)],
            foods: Vec::new(),
            prey: Some(Pos::new(3, 3)),
            obstacles: vec![Pos::new(6, 6), Pos::new(6, 5)],
            step_index: 0,
            done: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = pp_transition(&cfg, &mut s, &[Some(Action::East as usize), Some(Action::West as usize), Some(0)], &mut rng);
        assert_eq!(r, 2.0 * PP_CATCH_REWARD);
        assert_ne!(s.prey, Some(Pos::new(3, 3)));
    }

    #[test]
    fn corner_cells_read_as_walls() {
        let cfg = OpenEnvConfig::lbf_default();
        let s = lbf_state(
            vec![entity(0, 0, 1), entity(5, 5, 1), entity(3, 3, 1), entity(3, 0, 1)],
            vec![Food { pos: Pos::new(1, 1), level: 2, collected: false }],
        );
        let o = observe(&cfg, &s, 0);
        // row -1 and column -1 of the 3x3 window are outside the grid
        for cell in [0, 1, 2, 3, 6] {
            assert_eq!(&o[cell * 3..cell * 3 + 3], &[1.0, 0.0, 0.0]);
        }
        assert!((o[8 * 3 + 2] - 2.0 / 9.0).abs() < 1e-12);
        // everybody else is out of the 1-cell vision range
        assert!(o[30..].iter().all(|&x| x == 0.0));
        assert_eq!(o, observe(&cfg, &s, 0));
    }

    #[test]
    fn visibility_matches_neighbourhood() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (state, obs, _, _) = reset(&cfg, &idle(), &mut rng).unwrap();
            for (i, o) in obs.iter().enumerate() {
                let others: Vec<usize> = (0..4).filter(|&j| j != i).collect();
                for (k, &j) in others.iter().enumerate() {
                    let e = &state.entities[j];
                    let seen = e.active
                        && (e.pos.row - state.entities[i].pos.row).abs() <= 1
                        && (e.pos.col - state.entities[i].pos.col).abs() <= 1;
                    let flag = o[30 + 4 * k];
                    assert_eq!(flag == 1.0, seen);
                    if !seen {
                        assert!(o[30 + 4 * k..34 + 4 * k].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_ticks() {
        let dist = SuddenChangeDist::uniform(5, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ScheduleState { waiting_time: 3, active_team: vec![0], active_group: 1, changes: 0 };
        let (n, p) = tick_schedule(&s, &dist, 2, &idle(), &mut rng);
        assert_eq!((n.waiting_time, n.active_team.clone(), p.is_none()), (2, vec![0], true));
        let s = ScheduleState { waiting_time: 1, ..s };
        let (n, p) = tick_schedule(&s, &dist, 2, &idle(), &mut rng);
        assert!((5..=8).contains(&n.waiting_time) && p.is_some() && n.changes == 1);
        let s = ScheduleState { waiting_time: WAIT_NEVER, ..s };
        let (n, p) = tick_schedule(&s, &SuddenChangeDist::never(), 2, &idle(), &mut rng);
        assert_eq!((n, p.is_none()), (s, true));
    }

    #[test]
    fn stationary_episodes_never_change() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (mut env, _) = OpenEnv::reset(&cfg, &idle(), &mut rng).unwrap();
            let team = env.sched.active_team.clone();
            while !env.state.done {
                assert!(!env.step(&[1, 4], &idle(), &mut rng).unwrap().changed);
            }
            assert_eq!(env.sched.active_team, team);
        }
    }

    #[test]
    fn parse_labels() {
        assert_eq!(SuddenChangeDist::parse("stationary").unwrap(), SuddenChangeDist::never());
        let u = SuddenChangeDist::parse("U5-8").unwrap();
        assert_eq!(u, SuddenChangeDist::parse("U[5,8]").unwrap());
        assert_eq!(u.label(), "U[5,8]");
        assert!(SuddenChangeDist::parse("U8-5").is_err());
        assert!(SuddenChangeDist::parse("poisson").is_err());
    }

    #[test]
    fn activated_teammate_never_overlaps() {
        let cfg = OpenEnvConfig::lbf_default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = lbf_state(
            vec![entity(2, 2, 1), entity(0, 0, 1), entity(2, 2, 1), entity(4, 4, 1)],
            vec![Food { pos: Pos::new(4, 4), level: 1, collected: false }],
        );
        s.entities[2].active = false;
        s.entities[3].active = false;
        apply_team(&cfg, &mut s, &[0, 1], &mut rng);
        let active: Vec<Pos> = s.entities.iter().filter(|e| e.active).map(|e| e.pos).collect();
        assert_eq!(active.len(), 4);
        for (i, a) in active.iter().enumerate() {
            assert!(active[i + 1..].iter().all(|b| b != a));
            assert_ne!(*a, Pos::new(4, 4));
        }
    }
}
