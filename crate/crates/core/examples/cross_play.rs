//! Cross-play between two teammate families: one copy of the policy is
//! fine-tuned against each family, then every copy plays with every family.
//! Diagonal entries above the off-diagonal ones mean the fine-tuned
//! policies specialised.
//!
//! cargo run --release --example cross_play -- [checkpoint.json] [finetune_steps] [episodes]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use teamadapt::eval::{cross_play, CrossPlayUnit};
use teamadapt::teammates::{Archetype, TeammatePool};
use teamadapt::trainer::{latest_checkpoint, run_training, Checkpoint, TrainConfig};

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = match args.next().filter(|a| a != "-") {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = std::env::temp_dir().join("teamadapt_crossplay_demo");
            if latest_checkpoint(&dir.join("checkpoints")).is_none() {
                let mut cfg = TrainConfig::lbf_default();
                cfg.trainer.total_env_steps = 20_000;
                cfg.trainer.checkpoint_interval = 20_000;
                cfg.pool.generation_interval = 10_000;
                println!("training a base policy into {} ...", dir.display());
                run_training(cfg, &dir, None)?;
            }
            latest_checkpoint(&dir.join("checkpoints")).expect("checkpoint written")
        }
    };
    let finetune: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let episodes: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);

    let ck = Checkpoint::load(&ckpt)?;
    let pool = TeammatePool::load(&ckpt.parent().and_then(Path::parent).unwrap_or(Path::new(".")).join("pool"))?;
    let units: Vec<CrossPlayUnit> = [Archetype::NearestFood, Archetype::Follower]
        .iter()
        .map(|a| {
            let groups: Vec<usize> = pool.groups.iter().filter(|g| g.meta.family == a.name()).map(|g| g.id()).collect();
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for g in &pool.groups {
                if g.meta.family == a.name() {
                    *votes.entry(g.meta.cluster_id.unwrap_or(0)).or_default() += 1;
                }
            }
            let cluster = votes.into_iter().max_by_key(|&(_, n)| n).map_or(0, |(c, _)| c);
            CrossPlayUnit { label: a.name().into(), groups, cluster }
        })
        .collect();
    for u in &units {
        println!("unit {:<13} groups {:?} cluster {}", u.label, u.groups, u.cluster);
    }

    let m = cross_play(&ck.learner, &ck.bank, &ck.config, &pool, &units, finetune, episodes, 0)?;
    println!("\n{:<16}{}", "tuned \\ played", m.labels.iter().map(|l| format!("{l:>14}")).collect::<String>());
    for (l, row) in m.labels.iter().zip(&m.values) {
        println!("{l:<16}{}", row.iter().map(|v| format!("{v:>14.4}")).collect::<String>());
    }
    println!("diagonal {:.4}, off-diagonal {:.4}", m.diagonal_mean(), m.off_diagonal_mean());
    Ok(())
}
