//! Global and local context encoders and the losses that shape them.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gaussian_entropy, gaussian_log_density, Activation, GaussianHead, GaussianOut, GruCell, Mlp};
use crate::tape::{ParamStore, Tape, Var};

/// Diagonal jitter added to relational matrices before the log-determinant.
pub const DET_JITTER: f64 = 1e-6;

/// MLP → GRU → Gaussian head, one step at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentGaussianEncoder {
    pub mlp: Mlp,
    pub gru: GruCell,
    pub head: GaussianHead,
}

impl RecurrentGaussianEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d_in, hidden, hidden], Activation::Relu, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng),
            head: GaussianHead::new(store, &format!("{name}.head"), hidden, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.head.dim
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    /// Consumes one input row per sequence; returns the distribution and new hidden state.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> (GaussianOut, Var) {
        let f = self.mlp.forward(tape, store, x);
        let f = tape.relu(f);
        let h = self.gru.forward(tape, store, f, h);
        (self.head.forward(tape, store, h), h)
    }

    /// Runs a whole sequence of `B×d_in` inputs from a zero state.
    pub fn unroll(&self, tape: &mut Tape, store: &ParamStore, xs: &[Array2<f64>]) -> Result<Vec<(GaussianOut, Var)>> {
        let first = xs.first().ok_or(Error::Empty("encoder prefix"))?;
        let mut h = self.gru.zeros(tape, first.nrows());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let x = tape.constant(x.clone());
            let (g, h2) = self.step(tape, store, x, h);
            h = h2;
            out.push((g, h));
        }
        Ok(out)
    }
}

/// Global encoder over state and joint-action history.
pub type GlobalContextEncoder = RecurrentGaussianEncoder;
/// Per-agent encoder over local observation and action history.
pub type LocalContextEncoder = RecurrentGaussianEncoder;

/// Gaussian over `e` given a (detached) global context and local features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalHead {
    pub body: Mlp,
    pub head: GaussianHead,
}

impl VariationalHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, e_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            body: Mlp::new(store, &format!("{name}.body"), &[d_in, hidden, hidden], Activation::Relu, rng),
            head: GaussianHead::new(store, &format!("{name}.head"), hidden, e_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, feats: Var) -> GaussianOut {
        let x = tape.concat_cols(&[z, feats]);
        let h = self.body.forward(tape, store, x);
        let h = tape.relu(h);
        self.head.forward(tape, store, h)
    }
}

/// Predicts every teammate slot's observation and action logits from `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeammateReconstructor {
    pub obs_head: Mlp,
    pub act_head: Mlp,
    pub slots: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
}

impl TeammateReconstructor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        e_dim: usize,
        slots: usize,
        obs_dim: usize,
        n_actions: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            obs_head: Mlp::new(store, &format!("{name}.obs"), &[e_dim, hidden, hidden, slots * obs_dim], Activation::Relu, rng),
            act_head: Mlp::new(store, &format!("{name}.act"), &[e_dim, hidden, hidden, slots * n_actions], Activation::Relu, rng),
            slots,
            obs_dim,
            n_actions,
        }
    }

    /// `(predicted observations, action logits)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, e: Var) -> (Var, Var) {
        (self.obs_head.forward(tape, store, e), self.act_head.forward(tape, store, e))
    }
}

/// `η·bar + (1−η)·batch_mean`.
pub fn update_moving_average(bar: &[f64], batch_mean: &[f64], eta: f64) -> Result<Vec<f64>> {
    if bar.len() != batch_mean.len() {
        return Err(Error::InvalidArgument(format!("bar dim {} != mean dim {}", bar.len(), batch_mean.len())));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument("eta must lie in [0, 1]".into()));
    }
    Ok(bar.iter().zip(batch_mean).map(|(b, m)| eta * b + (1.0 - eta) * m).collect())
}

/// Per-cluster moving averages of global and local contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingAverageBank {
    pub eta: f64,
    pub z_dim: usize,
    pub e_dim: usize,
    pub n_agents: usize,
    pub z_bar: BTreeMap<usize, Vec<f64>>,
    /// Cluster → one bar per controllable agent.
    pub e_bar: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl MovingAverageBank {
    pub fn new(eta: f64, z_dim: usize, e_dim: usize, n_agents: usize) -> Self {
        Self { eta, z_dim, e_dim, n_agents, z_bar: BTreeMap::new(), e_bar: BTreeMap::new() }
    }

    /// Registers a cluster with zero bars if it is new.
    pub fn ensure(&mut self, cluster: usize) {
        self.z_bar.entry(cluster).or_insert_with(|| vec![0.0; self.z_dim]);
        let (n, d) = (self.n_agents, self.e_dim);
        self.e_bar.entry(cluster).or_insert_with(|| vec![vec![0.0; d]; n]);
    }

    pub fn z(&self, cluster: usize) -> Vec<f64> {
        self.z_bar.get(&cluster).cloned().unwrap_or_else(|| vec![0.0; self.z_dim])
    }

    pub fn e(&self, cluster: usize, agent: usize) -> Vec<f64> {
        self.e_bar.get(&cluster).map(|v| v[agent].clone()).unwrap_or_else(|| vec![0.0; self.e_dim])
    }
}

/// `R[i][j] = exp(−κ‖b_i − b_j‖²)`.
pub fn relational_matrix(means: &[Vec<f64>], kappa: f64) -> Array2<f64> {
    let m = means.len();
    Array2::from_shape_fn((m, m), |(i, j)| {
        let d2: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        (-kappa * d2).exp()
    })
}

/// Samples of one cluster for a consistency loss.
#[derive(Debug, Clone, Copy)]
pub struct ClusterSamples {
    pub cluster: usize,
    /// `N×d` context draws.
    pub samples: Var,
}

/// Result of a consistency loss: the scalar and the refreshed bars.
#[derive(Debug, Clone)]
pub struct ConsistencyOut {
    pub loss: Var,
    pub pull: Var,
    pub log_det: Var,
    /// New bar value for each cluster that had samples.
    pub updated: Vec<(usize, Vec<f64>)>,
}

/// Within-cluster pull toward each cluster's moving average minus the
/// log-determinant of the relational matrix over all `clusters`.
///
/// `old_bars` maps cluster → previous bar. The refreshed bar of a cluster
/// with samples keeps its gradient path through the batch mean inside the
/// relational matrix, while the pull term uses it as a constant target.
/// `frozen_targets`, when given, replaces those targets (same order as
/// `groups`) so the loss becomes a fixed differentiable function.
pub fn consistency_loss(
    tape: &mut Tape,
    groups: &[ClusterSamples],
    old_bars: &BTreeMap<usize, Vec<f64>>,
    clusters: &[usize],
    eta: f64,
    kappa: f64,
    frozen_targets: Option<&[Vec<f64>]>,
) -> Result<ConsistencyOut> {
    if groups.is_empty() {
        return Err(Error::Empty("cluster samples"));
    }
    let mut pull = tape.scalar_const(0.0);
    let mut bar_vars: BTreeMap<usize, Var> = BTreeMap::new();
    let mut updated = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let (n, d) = tape.shape(g.samples);
        if n == 0 {
            return Err(Error::Empty("cluster sample rows"));
        }
        let old = old_bars.get(&g.cluster).cloned().unwrap_or_else(|| vec![0.0; d]);
        if old.len() != d {
            return Err(Error::InvalidArgument("bar dimension mismatch".into()));
        }
        let mean = tape.mean_rows(g.samples);
        let fresh = tape.scale(mean, 1.0 - eta);
        let old_row = tape.constant(Array2::from_shape_vec((1, d), old.iter().map(|b| eta * b).collect()).expect("row"));
        let bar = tape.add(fresh, old_row);
        let bar_value: Vec<f64> = tape.value(bar).iter().copied().collect();
        let target = match frozen_targets {
            Some(t) => t[gi].clone(),
            None => bar_value.clone(),
        };
        let neg_target = tape.constant(Array2::from_shape_vec((1, d), target.iter().map(|x| -x).collect()).expect("row"));
        let diff = tape.add_row(g.samples, neg_target);
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let per_sample = tape.scale(total, 1.0 / n as f64);
        pull = tape.add(pull, per_sample);
        bar_vars.insert(g.cluster, bar);
        updated.push((g.cluster, bar_value));
    }

    let mut all: Vec<usize> = clusters.to_vec();
    for g in groups {
        if !all.contains(&g.cluster) {
            all.push(g.cluster);
        }
    }
    all.sort_unstable();
    all.dedup();
    let d = tape.shape(groups[0].samples).1;
    let bars: Vec<Var> = all
        .iter()
        .map(|c| match bar_vars.get(c) {
            Some(v) => *v,
            None => {
                let old = old_bars.get(c).cloned().unwrap_or_else(|| vec![0.0; d]);
                tape.constant(Array2::from_shape_vec((1, d), old).expect("row"))
            }
        })
        .collect();
    let m = bars.len();
    let mut entries: Vec<Vec<Var>> = vec![Vec::with_capacity(m); m];
    let diag = tape.scalar_const(1.0 + DET_JITTER);
    for i in 0..m {
        for j in 0..m {
            let v = if i == j {
                diag
            } else if j < i {
                entries[j][i]
            } else {
                let diff = tape.sub(bars[i], bars[j]);
                let sq = tape.square(diff);
                let d2 = tape.sum(sq);
                let scaled = tape.scale(d2, -kappa);
                tape.exp(scaled)
            };
            entries[i].push(v);
        }
    }
    let rows: Vec<Var> = entries.iter().map(|r| tape.concat_cols(r)).collect();
    let r = tape.concat_rows(&rows);
    let log_det = tape
        .log_det_spd(r)
        .ok_or_else(|| Error::NonFinite("relational matrix determinant".into()))?;
    let loss = tape.sub(pull, log_det);
    Ok(ConsistencyOut { loss, pull, log_det, updated })
}

/// Negative of the mutual-information lower bound for one sample set:
/// `−(mean log q(e | z, τ) + mean H(e | τ))`, `1×1`.
pub fn mi_loss(tape: &mut Tape, e: Var, q: GaussianOut, encoder_sigma: Var) -> Var {
    let lq = gaussian_log_density(tape, e, q);
    let lq = tape.mean(lq);
    let h = gaussian_entropy(tape, encoder_sigma);
    let h = tape.mean(h);
    let bound = tape.add(lq, h);
    tape.neg(bound)
}

/// Masked reconstruction loss for one sample set.
///
/// `target_obs` is `R×(slots·obs_dim)`, `target_actions[r][s]` the slot's
/// action, `mask` is `R×slots` with 1 for present teammates. The observation
/// term is the squared error averaged over features and present slot-steps;
/// the action term is the cross-entropy averaged over present slot-steps.
pub fn rec_loss(
    tape: &mut Tape,
    pred_obs: Var,
    pred_logits: Var,
    target_obs: &Array2<f64>,
    target_actions: &[Vec<usize>],
    mask: &Array2<f64>,
    obs_dim: usize,
    n_actions: usize,
) -> Result<Var> {
    let (rows, slots) = mask.dim();
    if tape.shape(pred_obs) != (rows, slots * obs_dim) || target_obs.dim() != (rows, slots * obs_dim) {
        return Err(Error::InvalidArgument("reconstruction observation shape mismatch".into()));
    }
    if tape.shape(pred_logits) != (rows, slots * n_actions) || target_actions.len() != rows {
        return Err(Error::InvalidArgument("reconstruction action shape mismatch".into()));
    }
    let present = mask.sum();
    if present == 0.0 {
        return Ok(tape.scalar_const(0.0));
    }
    let target = tape.constant(target_obs.clone());
    let diff = tape.sub(pred_obs, target);
    let sq = tape.square(diff);
    let mut total = tape.scalar_const(0.0);
    for s in 0..slots {
        let col = mask.column(s).to_owned().insert_axis(ndarray::Axis(1));
        if col.sum() == 0.0 {
            continue;
        }
        let m = tape.constant(col);
        let block = tape.slice_cols(sq, s * obs_dim, obs_dim);
        let per_row = tape.sum_cols(block);
        let per_row = tape.scale(per_row, 1.0 / obs_dim as f64);
        let masked = tape.mul(per_row, m);
        let obs_term = tape.sum(masked);

        let logits = tape.slice_cols(pred_logits, s * n_actions, n_actions);
        let lp = tape.log_softmax_rows(logits);
        let idx: Vec<usize> = (0..rows).map(|r| if mask[[r, s]] > 0.0 { target_actions[r][s] } else { 0 }).collect();
        let picked = tape.gather(lp, &idx);
        let picked = tape.mul(picked, m);
        let ll = tape.sum(picked);
        let term = tape.sub(obs_term, ll);
        total = tape.add(total, term);
    }
    Ok(tape.scale(total, 1.0 / present))
}

/// Loss weights of the auxiliary objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gce: f64,
    pub mi: f64,
    pub lce: f64,
    pub rec: f64,
}

impl LossWeights {
    pub fn lbf() -> Self {
        Self { gce: 1.0, mi: 0.001, lce: 1.0, rec: 0.1 }
    }

    pub fn zero() -> Self {
        Self { gce: 0.0, mi: 0.0, lce: 0.0, rec: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.gce, self.mi, self.lce, self.rec].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Objective of the global encoder and value networks.
pub fn adap_loss(td: f64, gce: f64, alpha_gce: f64) -> Result<f64> {
    if alpha_gce < 0.0 {
        return Err(Error::InvalidArgument("weights must be non-negative".into()));
    }
    Ok(td + alpha_gce * gce)
}

/// Objective of the local encoders, variational head and reconstructors.
pub fn dec_loss(td: f64, mi: f64, lce: f64, rec: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(td + w.mi * mi + w.lce * lce + w.rec * rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::nn::{reparameterize, standard_normal};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = 1.8378770664093453;

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(update_moving_average(&[0.0], &[2.0], 0.01).unwrap(), vec![1.98]);
        assert_eq!(update_moving_average(&[0.3, -1.0], &[5.0, 5.0], 1.0).unwrap(), vec![0.3, -1.0]);
        assert!(update_moving_average(&[0.0], &[1.0, 2.0], 0.5).is_err());
        assert!(update_moving_average(&[0.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn moving_average_converges_geometrically() {
        let (c, eta) = (3.0, 0.7);
        let mut bar = vec![0.0];
        for k in 1..=25 {
            bar = update_moving_average(&bar, &[c], eta).unwrap();
            let closed = c * (1.0 - f64::powi(eta, k));
            assert!((bar[0] - closed).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn relational_matrix_shape_and_closed_form() {
        let means = vec![vec![0.0, 0.0], vec![0.3, 0.4], vec![1.0, -2.0]];
        let r = relational_matrix(&means, 2.0);
        for i in 0..3 {
            assert_eq!(r[[i, i]], 1.0);
            for j in 0..3 {
                assert_eq!(r[[i, j]], r[[j, i]]);
                assert!(r[[i, j]] > 0.0 && r[[i, j]] <= 1.0);
            }
        }
        let (kappa, d2) = (1.5, 0.25);
        let r = relational_matrix(&[vec![0.0], vec![0.5]], kappa);
        assert!((r[[0, 1]] - (-kappa * d2).exp()).abs() < 1e-15);
        let det = r[[0, 0]] * r[[1, 1]] - r[[0, 1]] * r[[1, 0]];
        assert!((det - (1.0 - (-2.0 * kappa * d2).exp())).abs() < 1e-14);
    }

    #[test]
    fn identical_bars_stay_finite_through_jitter() {
        let mut tape = Tape::new();
        let s = tape.constant(array![[0.0, 0.0], [0.0, 0.0]]);
        let groups = [ClusterSamples { cluster: 0, samples: s }];
        let out = consistency_loss(&mut tape, &groups, &BTreeMap::new(), &[0, 1, 2], 0.01, 80.0, None);
        // three clusters at the origin: R is all ones and singular without jitter
        let det = out.map(|o| tape.scalar(o.log_det));
        match det {
            Ok(v) => assert!(v.is_finite()),
            Err(Error::NonFinite(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn consistency_single_cluster_at_bar_is_near_zero() {
        let mut tape = Tape::new();
        let bar = vec![0.5, -1.0];
        let s = tape.constant(array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]]);
        let bars = BTreeMap::from([(4, bar.clone())]);
        let out = consistency_loss(&mut tape, &[ClusterSamples { cluster: 4, samples: s }], &bars, &[4], 0.01, 80.0, None).unwrap();
        assert!((tape.scalar(out.loss) + (1.0 + DET_JITTER).ln()).abs() < 1e-12);
        assert!(tape.scalar(out.loss).abs() < 1e-5);
        assert_eq!(out.updated, vec![(4, bar)]);
    }

    #[test]
    fn consistency_two_far_clusters_is_near_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[0.0, 0.0], [0.0, 0.0]]);
        let b = tape.constant(array![[1.0, 0.0], [1.0, 0.0]]);
        let bars = BTreeMap::from([(0, vec![0.0, 0.0]), (1, vec![1.0, 0.0])]);
        let groups = [ClusterSamples { cluster: 0, samples: a }, ClusterSamples { cluster: 1, samples: b }];
        let out = consistency_loss(&mut tape, &groups, &bars, &[0, 1], 0.01, 80.0, None).unwrap();
        // −log det([[1+ε, e^-80],[e^-80, 1+ε]])
        let expected = -((1.0 + DET_JITTER).powi(2) - (-160.0f64).exp()).ln();
        assert!((tape.scalar(out.loss) - expected).abs() < 1e-12);
        assert!(tape.scalar(out.loss).abs() < 1e-5);
    }

    #[test]
    fn spreading_samples_increases_pull() {
        let bars = BTreeMap::from([(0, vec![0.0])]);
        let pull = |spread: f64| {
            let mut tape = Tape::new();
            let s = tape.constant(array![[-spread], [spread]]);
            let out = consistency_loss(&mut tape, &[ClusterSamples { cluster: 0, samples: s }], &bars, &[0], 0.5, 1.0, None)
                .unwrap();
            tape.scalar(out.pull)
        };
        let mut last = pull(0.0);
        for k in 1..6 {
            let next = pull(k as f64 * 0.3);
            assert!(next > last);
            last = next;
        }
    }

    #[test]
    fn unvisited_cluster_bars_are_not_refreshed() {
        let mut tape = Tape::new();
        let s = tape.constant(array![[1.0]]);
        let bars = BTreeMap::from([(0, vec![0.0]), (1, vec![5.0])]);
        let out = consistency_loss(&mut tape, &[ClusterSamples { cluster: 0, samples: s }], &bars, &[0, 1], 0.25, 1.0, None)
            .unwrap();
        assert_eq!(out.updated, vec![(0, vec![0.75])]);
    }

    fn consistency_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a", standard_normal(&mut rng, 3, 2).mapv(|x| 0.3 * x));
        store.add("b", standard_normal(&mut rng, 4, 2).mapv(|x| 0.3 * x + 0.2));
        store
    }

    fn consistency_value(tape: &mut Tape, store: &ParamStore, frozen: Option<&[Vec<f64>]>) -> Var {
        let ids: Vec<_> = store.ids().collect();
        let a = tape.param(store, ids[0]);
        let b = tape.param(store, ids[1]);
        let bars = BTreeMap::from([(0, vec![0.1, -0.1]), (2, vec![0.05, 0.3]), (7, vec![-0.2, 0.0])]);
        let groups = [ClusterSamples { cluster: 0, samples: a }, ClusterSamples { cluster: 2, samples: b }];
        consistency_loss(tape, &groups, &bars, &[0, 2, 7], 0.3, 2.0, frozen).unwrap().loss
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let store = consistency_store();
        let mut tape = Tape::new();
        let groups_targets = {
            let ids: Vec<_> = store.ids().collect();
            let a = tape.param(&store, ids[0]);
            let b = tape.param(&store, ids[1]);
            let bars = BTreeMap::from([(0, vec![0.1, -0.1]), (2, vec![0.05, 0.3]), (7, vec![-0.2, 0.0])]);
            let groups = [ClusterSamples { cluster: 0, samples: a }, ClusterSamples { cluster: 2, samples: b }];
            let out = consistency_loss(&mut tape, &groups, &bars, &[0, 2, 7], 0.3, 2.0, None).unwrap();
            out.updated.into_iter().map(|(_, v)| v).collect::<Vec<_>>()
        };
        let report = check_params(&store, 1e-5, 1, 1e-6, |t, s| consistency_value(t, s, Some(&groups_targets)));
        assert!(report.max_rel_err < 1e-4, "{report:?}");

        // Letting the targets move with the samples changes the numeric
        // derivative but not the tape gradient, so the check must fail.
        let moving = check_params(&store, 1e-5, 1, 1e-6, |t, s| consistency_value(t, s, None));
        assert!(moving.max_rel_err > 1e-2, "{moving:?}");
    }

    #[test]
    fn mi_terms_closed_form() {
        let mut tape = Tape::new();
        let e = tape.constant(row(&[0.2, -0.4, 1.0, 3.0]));
        let mu = tape.constant(row(&[0.2, -0.4, 1.0, 3.0]));
        let sigma = tape.constant(row(&[1.0; 4]));
        let lq = gaussian_log_density(&mut tape, e, GaussianOut { mu, sigma });
        assert!((tape.scalar(lq) + 2.0 * LN_2PI).abs() < 1e-12);
        assert!((tape.scalar(lq) + 3.6757).abs() < 1e-4);

        let s1 = tape.constant(row(&[1.0]));
        let h = gaussian_entropy(&mut tape, s1);
        assert!((tape.scalar(h) - 0.5 * (1.0 + LN_2PI)).abs() < 1e-12);
        assert!((tape.scalar(h) - 1.4189).abs() < 1e-4);

        let loss = mi_loss(&mut tape, e, GaussianOut { mu, sigma }, s1);
        assert!((tape.scalar(loss) - (2.0 * LN_2PI - 0.5 * (1.0 + LN_2PI))).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sig = [0.3, 1.7, 0.9];
        let n = 100_000;
        let mut tape = Tape::new();
        let s = tape.constant(row(&sig));
        let h = gaussian_entropy(&mut tape, s);
        let closed = tape.scalar(h);
        let draws = standard_normal(&mut rng, n, 3);
        let mut acc = 0.0;
        for r in 0..n {
            for d in 0..3 {
                let x = sig[d] * draws[[r, d]];
                acc -= -0.5 * (x / sig[d]).powi(2) - sig[d].ln() - 0.5 * LN_2PI;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() / closed.abs() < 0.01, "closed {closed} mc {mc}");
    }

    #[test]
    fn reparameterized_mean_matches_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let (mu_v, sig_v) = ([0.5, -2.0], [0.2, 1.5]);
        let mut tape = Tape::new();
        let mu = tape.constant(Array2::from_shape_fn((n, 2), |(_, d)| mu_v[d]));
        let sigma = tape.constant(Array2::from_shape_fn((n, 2), |(_, d)| sig_v[d]));
        let z = reparameterize(&mut tape, GaussianOut { mu, sigma }, standard_normal(&mut rng, n, 2));
        let mean = tape.value(z).mean_axis(ndarray::Axis(0)).unwrap();
        for d in 0..2 {
            assert!((mean[d] - mu_v[d]).abs() < 4.0 * sig_v[d] / (n as f64).sqrt());
        }
    }

    #[test]
    fn encoder_sigma_respects_floor_and_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = RecurrentGaussianEncoder::new(&mut store, "g", 5, 6, 8, &mut rng);
        let local = RecurrentGaussianEncoder::new(&mut store, "l", 5, 4, 8, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).mapv_inplace(|x| x * 1e4);
        }
        let xs = vec![Array2::from_elem((3, 5), 50.0), Array2::from_elem((3, 5), -50.0)];
        let mut tape = Tape::new();
        for (g, _) in enc.unroll(&mut tape, &store, &xs).unwrap() {
            assert_eq!(tape.shape(g.mu), (3, 6));
            assert!(tape.value(g.sigma).iter().all(|s| *s >= crate::nn::SIGMA_FLOOR));
        }
        let out = local.unroll(&mut tape, &store, &xs).unwrap();
        assert_eq!(tape.shape(out[0].0.mu), (3, 4));
        assert!(enc.unroll(&mut tape, &store, &[]).is_err());
    }

    #[test]
    fn encoder_eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = RecurrentGaussianEncoder::new(&mut store, "g", 3, 2, 8, &mut rng);
        let xs = vec![array![[0.1, 0.2, 0.3]], array![[1.0, 0.0, -1.0]]];
        let run = || {
            let mut tape = Tape::new();
            let out = enc.unroll(&mut tape, &store, &xs).unwrap();
            tape.value(out[1].0.mu).clone()
        };
        assert_eq!(run(), run());
    }

    fn rec_fixture(tape: &mut Tape, logits: Array2<f64>) -> (Var, Var, Array2<f64>, Vec<Vec<usize>>) {
        let target_obs = array![[1.0, 2.0, 0.0, 0.5], [0.0, -1.0, 3.0, 3.0]];
        let pred = tape.constant(target_obs.clone());
        let lg = tape.constant(logits);
        (pred, lg, target_obs, vec![vec![2, 0], vec![1, 1]])
    }

    #[test]
    fn rec_loss_examples() {
        // two slots, obs_dim 2, three actions
        let mask = array![[1.0, 1.0], [1.0, 0.0]];
        let mut tape = Tape::new();
        let (pred, lg, obs, acts) = rec_fixture(&mut tape, Array2::zeros((2, 6)));
        let uniform = rec_loss(&mut tape, pred, lg, &obs, &acts, &mask, 2, 3).unwrap();
        assert!((tape.scalar(uniform) - 3f64.ln()).abs() < 1e-12);

        let mut sharp = Array2::from_elem((2, 6), -60.0);
        for (r, a) in acts.iter().enumerate() {
            for (s, &k) in a.iter().enumerate() {
                sharp[[r, s * 3 + k]] = 60.0;
            }
        }
        let (pred, lg, obs, acts) = rec_fixture(&mut tape, sharp);
        let perfect = rec_loss(&mut tape, pred, lg, &obs, &acts, &mask, 2, 3).unwrap();
        assert!(tape.scalar(perfect).abs() < 1e-12);

        let none = rec_loss(&mut tape, pred, lg, &obs, &acts, &Array2::zeros((2, 2)), 2, 3).unwrap();
        assert_eq!(tape.scalar(none), 0.0);
        assert!(rec_loss(&mut tape, pred, lg, &obs, &acts, &Array2::zeros((3, 2)), 2, 3).is_err());
    }

    #[test]
    fn absent_slots_do_not_change_rec_loss() {
        let mask = array![[1.0, 0.0], [1.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = standard_normal(&mut rng, 2, 6);
        let pred_v = standard_normal(&mut rng, 2, 4);
        let value = |pred_v: &Array2<f64>, obs: &Array2<f64>, acts: &[Vec<usize>]| {
            let mut tape = Tape::new();
            let p = tape.constant(pred_v.clone());
            let l = tape.constant(logits.clone());
            let out = rec_loss(&mut tape, p, l, obs, acts, &mask, 2, 3).unwrap();
            tape.scalar(out)
        };
        let obs = array![[1.0, 2.0, 0.0, 0.5], [0.0, -1.0, 3.0, 3.0]];
        let base = value(&pred_v, &obs, &[vec![0, 1], vec![2, 2]]);
        let mut obs2 = obs.clone();
        obs2[[0, 2]] = 99.0;
        obs2[[1, 3]] = -7.0;
        let mut pred2 = pred_v.clone();
        pred2[[1, 2]] += 5.0;
        assert_eq!(base, value(&pred2, &obs2, &[vec![0, 0], vec![2, 1]]));
    }

    #[test]
    fn mi_and_rec_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        store.add("e", standard_normal(&mut rng, 3, 2));
        store.add("mu", standard_normal(&mut rng, 3, 2));
        store.add("sraw", standard_normal(&mut rng, 3, 2));
        store.add("enc_s", standard_normal(&mut rng, 3, 2).mapv(|x| x.abs() + 0.2));
        store.add("pred", standard_normal(&mut rng, 3, 4));
        store.add("logits", standard_normal(&mut rng, 3, 6));
        let target_obs = standard_normal(&mut rng, 3, 4);
        let acts = vec![vec![0, 2], vec![1, 1], vec![2, 0]];
        let mask = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let report = check_params(&store, 1e-5, 1, 1e-6, |t, s| {
            let ids: Vec<_> = s.ids().collect();
            let v: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
            let sp = t.softplus(v[2]);
            let sigma = t.add_scalar(sp, crate::nn::SIGMA_FLOOR);
            let mi = mi_loss(t, v[0], GaussianOut { mu: v[1], sigma }, v[3]);
            let rec = rec_loss(t, v[4], v[5], &target_obs, &acts, &mask, 2, 3).unwrap();
            t.add(mi, rec)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn combined_objectives() {
        assert_eq!(adap_loss(0.5, 0.2, 1.0).unwrap(), 0.7);
        assert_eq!(adap_loss(0.5, 0.2, 0.0).unwrap(), 0.5);
        assert!(adap_loss(0.5, 0.2, -1.0).is_err());
        assert!((dec_loss(1.0, 10.0, 0.5, 2.0, &LossWeights::lbf()).unwrap() - 1.71).abs() < 1e-12);
        assert_eq!(dec_loss(1.0, 10.0, 0.5, 2.0, &LossWeights::zero()).unwrap(), 1.0);
        let w = LossWeights::lbf();
        assert_eq!((w.gce, w.mi, w.lce, w.rec), (1.0, 0.001, 1.0, 0.1));
        assert!(LossWeights { gce: f64::NAN, ..w }.validate().is_err());
    }
}
