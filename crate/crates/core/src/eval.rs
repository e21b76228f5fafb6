//! Evaluation under sudden teammate changes, cross-play, PCA and reports.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{FixedTeammates, OpenEnvConfig, SuddenChangeDist};
use crate::error::{Error, Result};
use crate::stats::{mean, std_dev};
use crate::teammates::{run_episode, TeammatePool};
use crate::trainer::{optimize_step, rollout_episode, Actor, Learner, ReplayBuffer, TrainConfig};
use crate::context::MovingAverageBank;

/// Results of one evaluation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub label: String,
    pub dist: SuddenChangeDist,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Steps after which the teammates changed, per episode.
    pub change_steps: Vec<Vec<usize>>,
    /// Local context means, `[episode][t][agent]`.
    pub contexts: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Runs episodes whose teammates change according to `dist`. Agents act
/// greedily from local encoders only; encoder state carries over changes.
pub fn evaluate_nonstationary(
    learner: &Learner,
    env: &OpenEnvConfig,
    pool: &TeammatePool,
    dist: &SuddenChangeDist,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be >= 1".into()));
    }
    check_compatible(learner, env, pool)?;
    let mut cfg = env.clone();
    cfg.change_dist = *dist;
    let mut returns = Vec::with_capacity(episodes);
    let mut change_steps = Vec::with_capacity(episodes);
    let mut contexts = Vec::with_capacity(episodes);
    let mut actor = Actor::new(learner, 0.0);
    for _ in 0..episodes {
        let traj = run_episode(&cfg, pool, &mut actor, rng)?;
        returns.push(traj.episode_return());
        change_steps.push(traj.changes.iter().enumerate().filter(|(_, c)| **c).map(|(t, _)| t).collect());
        contexts.push(std::mem::take(&mut actor.context_log));
    }
    Ok(ConditionReport {
        label: dist.label(),
        dist: *dist,
        mean: mean(&returns),
        std: std_dev(&returns),
        returns,
        change_steps,
        contexts,
    })
}

fn check_compatible(learner: &Learner, env: &OpenEnvConfig, pool: &TeammatePool) -> Result<()> {
    if pool.env_kind != env.env_kind {
        return Err(Error::Checkpoint("teammate pool belongs to a different environment".into()));
    }
    if learner.obs_dim != env.obs_dim() || learner.n_agents != env.n_controllable || learner.n_actions != env.n_actions()
    {
        return Err(Error::Checkpoint("policy does not match the environment configuration".into()));
    }
    if pool.is_empty() {
        return Err(Error::Empty("teammate pool"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ConditionReport>,
    /// Stationary mean minus each condition's mean (present when a
    /// stationary row exists).
    pub degradation: Vec<(String, f64)>,
}

/// One row per change distribution, each seeded identically.
pub fn ood_sweep(
    learner: &Learner,
    env: &OpenEnvConfig,
    pool: &TeammatePool,
    dists: &[SuddenChangeDist],
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if dists.is_empty() {
        return Err(Error::Empty("condition list"));
    }
    let rows = dists
        .iter()
        .map(|d| evaluate_nonstationary(learner, env, pool, d, episodes, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<Vec<_>>>()?;
    let base = rows.iter().find(|r| r.dist.kind == crate::env::ChangeKind::Never).map(|r| r.mean);
    let degradation = match base {
        Some(b) => rows.iter().map(|r| (r.label.clone(), b - r.mean)).collect(),
        None => Vec::new(),
    };
    Ok(EvalReport { rows, degradation })
}

/// A set of teammate groups treated as one cross-play partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossPlayUnit {
    pub label: String,
    pub groups: Vec<usize>,
    /// Cluster tag used while fine-tuning against this unit.
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossPlayMatrix {
    pub labels: Vec<String>,
    /// `values[i][j]`: policy adapted to unit `i` playing with unit `j`.
    pub values: Vec<Vec<f64>>,
    pub episodes: usize,
    /// Rows whose adaptation diverged.
    pub invalid_rows: Vec<usize>,
}

impl CrossPlayMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        mean(&(0..self.values.len()).map(|i| self.values[i][i]).collect::<Vec<_>>())
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.values.len();
        let off: Vec<f64> =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]).collect();
        mean(&off)
    }
}

/// Mean stationary return of `learner` with teammates drawn from `unit`.
pub fn unit_return(
    learner: &Learner,
    env: &OpenEnvConfig,
    pool: &TeammatePool,
    unit: &CrossPlayUnit,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut cfg = env.clone();
    cfg.change_dist = SuddenChangeDist::never();
    let mut total = 0.0;
    let mut actor = Actor::new(learner, 0.0);
    for _ in 0..episodes {
        let gid = unit.groups[rng.random_range(0..unit.groups.len())];
        let g = pool.get(gid).ok_or_else(|| Error::InvalidArgument(format!("no group {gid}")))?;
        let source = FixedTeammates { group_id: gid, policy: g.policy.clone() };
        total += run_episode(&cfg, &source, &mut actor, rng)?.episode_return();
    }
    Ok(total / episodes as f64)
}

/// Fine-tunes a copy of `base` against one unit for `steps` env steps.
pub fn adapt_to_unit(
    base: &Learner,
    bank: &MovingAverageBank,
    config: &TrainConfig,
    pool: &TeammatePool,
    unit: &CrossPlayUnit,
    steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Learner> {
    let mut learner = base.clone();
    let mut bank = bank.clone();
    bank.ensure(unit.cluster);
    let mut replay = ReplayBuffer::new(config.trainer.replay_capacity);
    let clusters: Vec<usize> = bank.z_bar.keys().copied().collect();
    let eps = config.qmix.epsilon_end;
    let mut done = 0;
    while done < steps {
        let gid = unit.groups[rng.random_range(0..unit.groups.len())];
        let ep = rollout_episode(&learner, pool, gid, unit.cluster, &config.env, eps, rng)?;
        done += ep.len() as u64;
        replay.push(ep);
        if replay.len() >= config.trainer.batch_size {
            optimize_step(&mut learner, &replay, &mut bank, &clusters, config, rng)?;
        }
    }
    if !learner.store.all_finite() {
        return Err(Error::NonFinite("adapted parameters".into()));
    }
    Ok(learner)
}

/// Cross-play: each row policy is fine-tuned against its unit, then every
/// row is evaluated with every column's teammates.
pub fn cross_play(
    base: &Learner,
    bank: &MovingAverageBank,
    config: &TrainConfig,
    pool: &TeammatePool,
    units: &[CrossPlayUnit],
    finetune_steps: u64,
    episodes: usize,
    seed: u64,
) -> Result<CrossPlayMatrix> {
    if units.is_empty() || units.iter().any(|u| u.groups.is_empty()) {
        return Err(Error::Empty("cross-play units"));
    }
    check_compatible(base, &config.env, pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = units.len();
    let mut values = vec![vec![f64::NAN; n]; n];
    let mut invalid_rows = Vec::new();
    for (i, row_unit) in units.iter().enumerate() {
        let adapted = match adapt_to_unit(base, bank, config, pool, row_unit, finetune_steps, &mut rng) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => {
                invalid_rows.push(i);
                continue;
            }
            Err(e) => return Err(e),
        };
        for (j, col_unit) in units.iter().enumerate() {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ ((j as u64 + 1) << 32));
            values[i][j] = unit_return(&adapted, &config.env, pool, col_unit, episodes, &mut eval_rng)?;
        }
    }
    Ok(CrossPlayMatrix { labels: units.iter().map(|u| u.label.clone()).collect(), values, episodes, invalid_rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal axes, one per output dimension.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    pub projected: Vec<Vec<f64>>,
}

/// Projects centred points onto their top `out_dim` principal axes.
pub fn pca_project(points: &[Vec<f64>], out_dim: usize) -> Result<Pca> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Empty("points"));
    }
    let d = points[0].len();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!("out_dim {out_dim} must lie in 1..={d}")));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArgument("points have different dimensions".into()));
    }
    let mut mu = vec![0.0; d];
    for p in points {
        for (m, x) in mu.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |r, c| points[r][c] - mu[c]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(out_dim);
    let mut explained_ratio = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_ratio.push(if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 });
    }
    let projected = (0..n)
        .map(|r| components.iter().map(|c| (0..d).map(|j| x[(r, j)] * c[j]).sum()).collect())
        .collect();
    Ok(Pca { mean: mu, components, explained_ratio, projected })
}

/// Absolute one-step changes of a 1-D series inside the `window` steps
/// following each change, and inside stable stretches.
///
/// `changes` holds steps `c` after which the teammates changed; the
/// series value at index `t` is the context computed from observation `t`.
/// The first `window` steps of the episode belong to neither set: the reset
/// draws the teammates just like a change does.
pub fn change_response(series: &[f64], changes: &[usize], window: usize) -> (Vec<f64>, Vec<f64>) {
    let mut after = Vec::new();
    let mut stable = Vec::new();
    for t in 1..series.len() {
        let delta = (series[t] - series[t - 1]).abs();
        let near = changes.iter().any(|&c| t > c && t <= c + window);
        if near {
            after.push(delta);
        } else if t > window {
            stable.push(delta);
        }
    }
    (after, stable)
}

/// Projects every agent-0 context of a report onto one principal axis.
pub fn context_series(report: &ConditionReport, agent: usize) -> Result<Vec<Vec<f64>>> {
    let pts: Vec<Vec<f64>> = report.contexts.iter().flat_map(|ep| ep.iter().map(|t| t[agent].clone())).collect();
    let pca = pca_project(&pts, 1)?;
    let mut out = Vec::with_capacity(report.contexts.len());
    let mut k = 0;
    for ep in &report.contexts {
        out.push(pca.projected[k..k + ep.len()].iter().map(|p| p[0]).collect());
        k += ep.len();
    }
    Ok(out)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Minimal raster plot: axes box, polylines, markers and points.
struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
    margin: u32,
}

impl Canvas {
    fn new(w: u32, h: u32, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| if (b - a).abs() < 1e-12 { (a - 1.0, b + 1.0) } else { (a, b) };
        let mut c = Self { img: RgbImage::from_pixel(w, h, Rgb([255, 255, 255])), x_range: pad(x_range), y_range: pad(y_range), margin: 20 };
        let (m, w, h) = (c.margin as i64, w as i64, h as i64);
        let black = Rgb([0, 0, 0]);
        c.line_px((m, h - m), (w - m, h - m), black);
        c.line_px((m, m), (m, h - m), black);
        c
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (w, h) = (self.img.width() as f64, self.img.height() as f64);
        let m = self.margin as f64;
        let px = m + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0) * (w - 2.0 * m);
        let py = h - m - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0) * (h - 2.0 * m);
        (px.round() as i64, py.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line_px(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            let a = self.to_px(w[0].0, w[0].1);
            let b = self.to_px(w[1].0, w[1].1);
            self.line_px(a, b, c);
        }
    }

    fn vmarker(&mut self, x: f64, c: Rgb<u8>) {
        let (px, _) = self.to_px(x, 0.0);
        let h = self.img.height() as i64;
        let m = self.margin as i64;
        let mut y = m;
        while y < h - m {
            self.put(px, y, c);
            y += 2;
        }
    }

    fn dot(&mut self, x: f64, y: f64, c: Rgb<u8>) {
        let (px, py) = self.to_px(x, y);
        for dx in -2..=2 {
            for dy in -2..=2 {
                self.put(px + dx, py + dy, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Summary written by [`emit_report`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub conditions: Vec<(String, f64, f64)>,
    pub degradation: Vec<(String, f64)>,
    pub crossplay: Option<CrossPlayMatrix>,
    pub written: Vec<PathBuf>,
    pub missing: Vec<String>,
}

/// Renders tables and plots from whatever logs exist in `dir`.
///
/// Reads `eval_report.json`, `crossplay.json`, `metrics.jsonl` and
/// `pool/`; writes CSV, PNG and `summary.json`. Missing inputs are listed
/// in the summary.
pub fn emit_report(dir: &Path) -> Result<ReportSummary> {
    let mut s = ReportSummary::default();
    let out = |name: &str| dir.join(name);

    match fs::read(out("eval_report.json")) {
        Ok(bytes) => {
            let rep: EvalReport = serde_json::from_slice(&bytes)?;
            let mut csv = String::from("condition,mean_return,std_return,episodes,degradation\n");
            for r in &rep.rows {
                let deg = rep.degradation.iter().find(|(l, _)| *l == r.label).map(|(_, d)| d.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{},{},{},{}\n", r.label, r.mean, r.std, r.returns.len(), deg));
                s.conditions.push((r.label.clone(), r.mean, r.std));
            }
            s.degradation = rep.degradation.clone();
            fs::write(out("returns.csv"), csv)?;
            s.written.push(out("returns.csv"));
            if let Some(r) = rep.rows.iter().find(|r| !r.change_steps.iter().all(|c| c.is_empty())) {
                plot_context_curves(r, &out("context_curves.png"))?;
                s.written.push(out("context_curves.png"));
            }
        }
        Err(_) => s.missing.push("eval_report.json".into()),
    }

    match fs::read(out("crossplay.json")) {
        Ok(bytes) => {
            let m: CrossPlayMatrix = serde_json::from_slice(&bytes)?;
            let mut csv = format!("row,{}\n", m.labels.join(","));
            for (label, row) in m.labels.iter().zip(&m.values) {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                csv.push_str(&format!("{label},{}\n", vals.join(",")));
            }
            fs::write(out("crossplay.csv"), csv)?;
            s.written.push(out("crossplay.csv"));
            s.crossplay = Some(m);
        }
        Err(_) => s.missing.push("crossplay.json".into()),
    }

    match fs::File::open(out("metrics.jsonl")) {
        Ok(f) => {
            let mut pts = Vec::new();
            for line in BufReader::new(f).lines() {
                let v: serde_json::Value = serde_json::from_str(&line?)?;
                if v["kind"] == "update" {
                    if let (Some(x), Some(y)) = (v["env_steps"].as_f64(), v["mean_return"].as_f64()) {
                        pts.push((x, y));
                    }
                }
            }
            if pts.is_empty() {
                s.missing.push("metrics.jsonl (no update records)".into());
            } else {
                let mut c = Canvas::new(640, 360, bounds(pts.iter().map(|p| p.0)), bounds(pts.iter().map(|p| p.1)));
                c.polyline(&pts, Rgb(PALETTE[0]));
                c.save(&out("learning_curve.png"))?;
                s.written.push(out("learning_curve.png"));
            }
        }
        Err(_) => s.missing.push("metrics.jsonl".into()),
    }

    match TeammatePool::load(&out("pool")) {
        Ok(pool) => {
            let labelled: Vec<(Vec<f64>, usize)> = pool
                .groups
                .iter()
                .filter_map(|g| Some((g.meta.embedding.clone()?, g.meta.cluster_id?)))
                .collect();
            if labelled.len() >= 2 && labelled[0].0.len() >= 2 {
                let pts: Vec<Vec<f64>> = labelled.iter().map(|(v, _)| v.clone()).collect();
                let pca = pca_project(&pts, 2)?;
                let mut c = Canvas::new(
                    480,
                    480,
                    bounds(pca.projected.iter().map(|p| p[0])),
                    bounds(pca.projected.iter().map(|p| p[1])),
                );
                for (p, (_, cl)) in pca.projected.iter().zip(&labelled) {
                    c.dot(p[0], p[1], Rgb(PALETTE[cl % PALETTE.len()]));
                }
                c.save(&out("pca_embeddings.png"))?;
                s.written.push(out("pca_embeddings.png"));
            } else {
                s.missing.push("pool embeddings".into());
            }
        }
        Err(_) => s.missing.push("pool/".into()),
    }

    fs::write(out("summary.json"), serde_json::to_vec_pretty(&s)?)?;
    Ok(s)
}

/// First-component local-context curves of the first few episodes with a
/// dashed marker at every change.
pub fn plot_context_curves(report: &ConditionReport, path: &Path) -> Result<()> {
    let series = context_series(report, 0)?;
    let shown = series.len().min(4);
    let t_max = series.iter().take(shown).map(|s| s.len()).max().unwrap_or(1) as f64;
    let mut c = Canvas::new(
        640,
        200 * shown as u32,
        (0.0, t_max),
        bounds(series.iter().take(shown).flatten().copied()),
    );
    for (k, s) in series.iter().take(shown).enumerate() {
        let pts: Vec<(f64, f64)> = s.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect();
        c.polyline(&pts, Rgb(PALETTE[k % PALETTE.len()]));
        for &ch in &report.change_steps[k] {
            c.vmarker(ch as f64 + 0.5, Rgb(PALETTE[k % PALETTE.len()]));
        }
    }
    c.save(path)
}
