//! One foraging (or predator-prey) episode with scripted teammates that get
//! swapped every 5-8 steps. Controllable agents act uniformly at random.
//! Prints the grid whenever the teammates change and dumps every step as
//! JSON lines.
//!
//! cargo run --release --example lbf_rollout -- [lbf|pp] [seed]

use std::fs::File;
use std::io::BufWriter;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teamadapt::env::{render, write_step_records, OpenEnv, OpenEnvConfig, StepRecord, SuddenChangeDist};
use teamadapt::teammates::{Archetype, TeammatePolicy, TeammatePool};

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let pp = args.next().is_some_and(|a| a == "pp");
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let (mut cfg, families) = if pp {
        (OpenEnvConfig::pp_default(), [Archetype::DirectChaser, Archetype::Flanker, Archetype::Lazy])
    } else {
        (OpenEnvConfig::lbf_default(), [Archetype::NearestFood, Archetype::Follower, Archetype::RandomWalker])
    };
    cfg.change_dist = SuddenChangeDist::uniform(5, 8)?;

    let mut pool = TeammatePool::new(cfg.env_kind);
    for (k, a) in families.into_iter().enumerate() {
        pool.add(TeammatePolicy::scripted(a, 0.0), a.name().into(), k as u64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut env, mut obs) = OpenEnv::reset(&cfg, &pool, &mut rng)?;
    println!("t=0  team {:?} playing {}\n{}\n", env.sched.active_team, env.policy.label(), render(&cfg, &env.state));

    let mut records = Vec::new();
    let mut ret = 0.0;
    let mut t = 0;
    while !env.state.done {
        let actions: Vec<usize> = (0..cfg.n_controllable).map(|_| rng.random_range(0..cfg.n_actions())).collect();
        let state = env.global_state();
        let out = env.step(&actions, &pool, &mut rng)?;
        ret += out.reward;
        records.push(StepRecord {
            t,
            state,
            obs,
            actions: out.joint_actions.clone(),
            reward: out.reward,
            done: out.done,
            active_team: env.sched.active_team.clone(),
            cluster_id: None,
        });
        obs = out.obs;
        t += 1;
        if out.changed {
            println!("t={t}  change -> team {:?} playing {}\n{}\n", env.sched.active_team, env.policy.label(), render(&cfg, &env.state));
        }
    }
    let path = std::env::temp_dir().join("teamadapt_rollout.jsonl");
    write_step_records(BufWriter::new(File::create(&path)?), &records)?;
    println!("{t} steps, {} changes, return {ret:.3}; steps written to {}", env.sched.changes, path.display());
    Ok(())
}
