//! Generates eight scripted foraging groups from three families, trains the
//! behaviour model and prints the cluster each group lands in.
//!
//! cargo run --release --example crp_clustering -- [seed] [model_train_steps]

use std::collections::BTreeMap;

use teamadapt::trainer::{TrainConfig, Trainer};

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut config = TrainConfig::lbf_default();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        config.crp.train_steps = steps;
    }
    config.trainer.seed = seed;
    config.pool.max_groups = 8;
    let mut trainer = Trainer::new(config, None)?;
    while trainer.pool.len() < 8 {
        trainer.generate()?;
    }
    let mut by_cluster: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for g in &trainer.pool.groups {
        let c = g.meta.cluster_id.expect("assigned");
        println!("group {:>2}  {:<14} -> cluster {c}", g.meta.group_id, g.meta.family);
        by_cluster.entry(c).or_default().push(g.meta.family.clone());
    }
    let mut majority = 0;
    for (c, fams) in &by_cluster {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for f in fams {
            *counts.entry(f).or_default() += 1;
        }
        majority += counts.values().max().copied().unwrap_or(0);
        println!("cluster {c}: {counts:?}");
    }
    println!("{} clusters, purity {:.3}", by_cluster.len(), majority as f64 / trainer.pool.len() as f64);
    Ok(())
}
