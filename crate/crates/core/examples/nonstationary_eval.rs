//! Evaluates a policy with teammates that never change, change every 5-8
//! steps, and change every 3 steps, then prints the degradation table.
//!
//! Pass a checkpoint from `teamadapt train`, or nothing to train a short
//! foraging run first.
//!
//! cargo run --release --example nonstationary_eval -- [checkpoint.json] [episodes]

use std::path::{Path, PathBuf};

use teamadapt::env::SuddenChangeDist;
use teamadapt::eval::ood_sweep;
use teamadapt::teammates::TeammatePool;
use teamadapt::trainer::{latest_checkpoint, run_training, Checkpoint, TrainConfig};

/// Trains `steps` foraging steps into a temp dir and returns its latest checkpoint.
fn quick_checkpoint(name: &str, steps: u64) -> teamadapt::Result<PathBuf> {
    let dir = std::env::temp_dir().join(name);
    if let Some(ck) = latest_checkpoint(&dir.join("checkpoints")) {
        return Ok(ck);
    }
    let mut cfg = TrainConfig::lbf_default();
    cfg.trainer.total_env_steps = steps;
    cfg.trainer.checkpoint_interval = steps;
    cfg.pool.generation_interval = steps / 2;
    println!("training {steps} steps into {} ...", dir.display());
    run_training(cfg, &dir, None)?;
    Ok(latest_checkpoint(&dir.join("checkpoints")).expect("checkpoint written"))
}

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = match args.next() {
        Some(p) => PathBuf::from(p),
        None => quick_checkpoint("teamadapt_eval_demo", 20_000)?,
    };
    let episodes: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let ck = Checkpoint::load(&ckpt)?;
    let run_dir = ckpt.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    let pool = TeammatePool::load(&run_dir.join("pool"))?;

    let dists = ["stationary", "U5-8", "U3-3"].map(|d| SuddenChangeDist::parse(d).unwrap());
    let rep = ood_sweep(&ck.learner, &ck.config.env, &pool, &dists, episodes, 0)?;
    println!("{:<12} {:>10} {:>8} {:>12}", "condition", "mean", "std", "degradation");
    for (r, (_, d)) in rep.rows.iter().zip(&rep.degradation) {
        let changes: usize = r.change_steps.iter().map(Vec::len).sum();
        println!(
            "{:<12} {:>10.4} {:>8.4} {:>12.4}   ({:.1} changes per episode)",
            r.label,
            r.mean,
            r.std,
            d,
            changes as f64 / episodes as f64
        );
    }
    Ok(())
}
