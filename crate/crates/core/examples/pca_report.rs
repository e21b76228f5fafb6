//! Trains a short run, evaluates it under sudden changes and renders the
//! report: returns table, learning curve, embedding PCA and context curves.
//! Also prints how much more the agent-0 context moves right after a change.
//!
//! cargo run --release --example pca_report -- [run_dir] [steps]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamadapt::env::SuddenChangeDist;
use teamadapt::eval::{change_response, context_series, emit_report, evaluate_nonstationary, ood_sweep, pca_project};
use teamadapt::stats::mean;
use teamadapt::teammates::TeammatePool;
use teamadapt::trainer::{latest_checkpoint, run_training, Checkpoint, TrainConfig};

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("teamadapt_report_demo"));
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(20_000);

    if latest_checkpoint(&dir.join("checkpoints")).is_none() {
        let mut cfg = TrainConfig::lbf_default();
        cfg.trainer.total_env_steps = steps;
        cfg.trainer.checkpoint_interval = steps;
        cfg.pool.generation_interval = steps / 2;
        println!("training {steps} steps into {} ...", dir.display());
        run_training(cfg, &dir, None)?;
    }
    let ck = Checkpoint::load(&latest_checkpoint(&dir.join("checkpoints")).expect("checkpoint"))?;
    let pool = TeammatePool::load(&dir.join("pool"))?;

    let dists = [SuddenChangeDist::never(), SuddenChangeDist::uniform(5, 8)?];
    let rep = ood_sweep(&ck.learner, &ck.config.env, &pool, &dists, 100, 0)?;
    std::fs::write(dir.join("eval_report.json"), serde_json::to_vec_pretty(&rep)?)?;

    let embeds: Vec<Vec<f64>> = pool.groups.iter().filter_map(|g| g.meta.embedding.clone()).collect();
    if embeds.len() >= 2 {
        let pca = pca_project(&embeds, 2)?;
        println!("group embeddings: {} points, explained variance {:?}", embeds.len(), pca.explained_ratio);
    }

    let cond = evaluate_nonstationary(&ck.learner, &ck.config.env, &pool, &dists[1], 100, &mut ChaCha8Rng::seed_from_u64(1))?;
    let (mut after, mut stable) = (Vec::new(), Vec::new());
    for (s, ch) in context_series(&cond, 0)?.iter().zip(&cond.change_steps) {
        let (a, b) = change_response(s, ch, 3);
        after.extend(a);
        stable.extend(b);
    }
    println!(
        "context movement: {:.4} within 3 steps of a change, {:.4} otherwise (ratio {:.2})",
        mean(&after),
        mean(&stable),
        mean(&after) / mean(&stable)
    );

    let summary = emit_report(&dir)?;
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
