//! Short foraging training run with a throughput report.
//!
//! cargo run --release --example train_smoke -- [steps] [batch_size]

use std::time::Instant;

use teamadapt::trainer::{TrainConfig, Trainer};

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let mut config = TrainConfig::lbf_default();
    config.trainer.total_env_steps = steps;
    if let Some(bs) = args.next().and_then(|s| s.parse().ok()) {
        config.trainer.batch_size = bs;
    }
    let dir = std::env::temp_dir().join("teamadapt_smoke");
    let start = Instant::now();
    let mut trainer = Trainer::new(config, Some(dir.clone()))?;
    let summary = trainer.run()?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} steps, {} episodes, {} updates, {} groups in {} clusters",
        summary.env_steps, summary.episodes, summary.updates, summary.n_groups, summary.n_clusters
    );
    println!("{secs:.1}s ({:.0} steps/s); logs in {}", summary.env_steps as f64 / secs, dir.display());
    if let Some(last) = trainer.metrics.last() {
        println!("last metrics: {last}");
    }
    Ok(())
}
