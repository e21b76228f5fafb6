//! Per-agent recurrent Q networks and the monotonic mixer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, GruCell, Linear, Mlp};
use crate::tape::{self, ParamStore, Tape, Var};

/// Recurrent Q network shared by all controllable agents.
///
/// Input per row: observation, previous action one-hot, agent id one-hot and
/// the agent's local context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentQNetwork {
    pub fc_in: Linear,
    pub gru: GruCell,
    pub fc_out: Linear,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub e_dim: usize,
}

impl AgentQNetwork {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        obs_dim: usize,
        n_actions: usize,
        n_agents: usize,
        e_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let d_in = obs_dim + n_actions + n_agents + e_dim;
        Self {
            fc_in: Linear::new(store, "agent.in", d_in, hidden, rng),
            gru: GruCell::new(store, "agent.gru", hidden, hidden, rng),
            fc_out: Linear::new(store, "agent.out", hidden, n_actions, rng),
            obs_dim,
            n_actions,
            n_agents,
            e_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents + self.e_dim
    }

    /// Builds the non-context part of an input row.
    pub fn base_input(&self, obs: &[f64], prev_action: Option<usize>, agent: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.input_dim() - self.e_dim);
        row.extend_from_slice(obs);
        let mut a = vec![0.0; self.n_actions];
        if let Some(p) = prev_action {
            a[p] = 1.0;
        }
        row.extend(a);
        let mut id = vec![0.0; self.n_agents];
        id[agent] = 1.0;
        row.extend(id);
        row
    }

    /// `(Q values R×|A|, new hidden R×H)` for base inputs and contexts.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, base: Var, e: Var, h: Var) -> (Var, Var) {
        let x = tape.concat_cols(&[base, e]);
        let x = self.fc_in.forward(tape, store, x);
        let x = tape.relu(x);
        let h = self.gru.forward(tape, store, x, h);
        (self.fc_out.forward(tape, store, h), h)
    }
}

/// Hyper-network mixer; mixing weights pass through `abs` so `Q_tot` is
/// nondecreasing in every agent value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicMixer {
    pub hyper_w1: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2: Linear,
    pub hyper_b2: Mlp,
    pub n_agents: usize,
    pub embed: usize,
    pub cond_dim: usize,
}

impl MonotonicMixer {
    pub fn new<R: Rng>(store: &mut ParamStore, n_agents: usize, cond_dim: usize, embed: usize, rng: &mut R) -> Self {
        Self {
            hyper_w1: Linear::new(store, "mix.w1", cond_dim, n_agents * embed, rng),
            hyper_b1: Linear::new(store, "mix.b1", cond_dim, embed, rng),
            hyper_w2: Linear::new(store, "mix.w2", cond_dim, embed, rng),
            hyper_b2: Mlp::new(store, "mix.b2", &[cond_dim, embed, 1], Activation::Relu, rng),
            n_agents,
            embed,
            cond_dim,
        }
    }

    /// `Q_tot` per row from chosen agent values `q` (R×n) and the
    /// conditioning input `cond` = state ⊕ global context (R×cond_dim).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, cond: Var) -> Result<Var> {
        let (rows, n) = tape.shape(q);
        if n != self.n_agents || tape.shape(cond) != (rows, self.cond_dim) {
            return Err(Error::InvalidArgument(format!(
                "mixer expects {}/{} columns, got {}/{}",
                self.n_agents,
                self.cond_dim,
                n,
                tape.shape(cond).1
            )));
        }
        let w1 = self.hyper_w1.forward(tape, store, cond);
        let w1 = tape.abs(w1);
        let b1 = self.hyper_b1.forward(tape, store, cond);
        let w2 = self.hyper_w2.forward(tape, store, cond);
        let w2 = tape.abs(w2);
        let b2 = self.hyper_b2.forward(tape, store, cond);
        let hidden = tape.row_vec_mat(q, w1, self.embed);
        let hidden = tape.add(hidden, b1);
        let hidden = tape.elu(hidden);
        let out = tape.mul(hidden, w2);
        let out = tape.sum_cols(out);
        Ok(tape.add(out, b2))
    }

    /// Generated mixing weights for one conditioning row:
    /// `(W1 n×E, b1, w2, b2)`.
    pub fn weights(&self, store: &ParamStore, cond: &[f64]) -> (Array2<f64>, Vec<f64>, Vec<f64>, f64) {
        let mut tape = Tape::new();
        let c = tape.constant(Array2::from_shape_vec((1, cond.len()), cond.to_vec()).expect("row"));
        let w1 = self.hyper_w1.forward(&mut tape, store, c);
        let b1 = self.hyper_b1.forward(&mut tape, store, c);
        let w2 = self.hyper_w2.forward(&mut tape, store, c);
        let b2 = self.hyper_b2.forward(&mut tape, store, c);
        let w1 = tape.value(w1).mapv(f64::abs).into_shape_with_order((self.n_agents, self.embed)).expect("w1");
        (
            w1,
            tape.value(b1).iter().copied().collect(),
            tape.value(w2).iter().map(|w| w.abs()).collect(),
            tape.scalar(b2),
        )
    }
}

/// Mixing with explicit weights: `Σ_j w2_j · elu(Σ_i q_i W1_ij + b1_j) + b2`.
pub fn mix_with_weights(q: &[f64], w1: &Array2<f64>, b1: &[f64], w2: &[f64], b2: f64) -> Result<f64> {
    let (n, e) = w1.dim();
    if q.len() != n || b1.len() != e || w2.len() != e {
        return Err(Error::InvalidArgument("mixing weight shapes do not match".into()));
    }
    let mut out = b2;
    for j in 0..e {
        let pre: f64 = (0..n).map(|i| q[i] * w1[[i, j]]).sum::<f64>() + b1[j];
        out += w2[j] * tape::elu(pre);
    }
    Ok(out)
}

/// `r + γ·(1−done)·next`.
pub fn td_targets(rewards: &[f64], dones: &[bool], next_q_tot: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(next_q_tot)
        .map(|((r, d), n)| r + if *d { 0.0 } else { gamma * n })
        .collect()
}

/// Mean squared TD error over rows of `q_tot` (R×1) against constant targets.
pub fn td_loss(tape: &mut Tape, q_tot: Var, targets: &[f64]) -> Result<Var> {
    let rows = tape.shape(q_tot).0;
    if rows == 0 || targets.is_empty() {
        return Err(Error::Empty("td batch"));
    }
    if rows != targets.len() {
        return Err(Error::InvalidArgument("td target count mismatch".into()));
    }
    let y = tape.constant(Array2::from_shape_vec((rows, 1), targets.to_vec()).expect("col"));
    let diff = tape.sub(q_tot, y);
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// ε-greedy over available actions; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, avail: &[bool], rng: &mut R) -> Result<usize> {
    if q.len() != avail.len() {
        return Err(Error::InvalidArgument("q/avail length mismatch".into()));
    }
    let legal: Vec<usize> = (0..q.len()).filter(|&a| avail[a]).collect();
    if legal.is_empty() {
        return Err(Error::Empty("available actions"));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(legal[rng.random_range(0..legal.len())]);
    }
    let mut best = legal[0];
    for &a in &legal[1..] {
        if q[a] > q[best] {
            best = a;
        }
    }
    Ok(best)
}

/// Frozen copy of every learner network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBundle {
    pub store: ParamStore,
    pub sync_interval: usize,
    /// Optimizer updates since the last sync.
    pub since_sync: usize,
}

impl TargetBundle {
    pub fn new(live: &ParamStore, sync_interval: usize) -> Self {
        Self { store: live.clone(), sync_interval, since_sync: 0 }
    }

    /// Counts one update and syncs when the interval is reached.
    pub fn tick(&mut self, live: &ParamStore) -> bool {
        self.since_sync += 1;
        if self.since_sync >= self.sync_interval {
            sync_target(live, self);
            true
        } else {
            false
        }
    }
}

/// Copies live parameters into the target bundle.
pub fn sync_target(live: &ParamStore, target: &mut TargetBundle) {
    target.store.copy_from(live);
    target.since_sync = 0;
}

/// Linear schedule from `start` to `end` over `steps`.
pub fn epsilon_at(step: u64, start: f64, end: f64, steps: u64) -> f64 {
    if steps == 0 || step >= steps {
        return end;
    }
    start + (end - start) * step as f64 / steps as f64
}
