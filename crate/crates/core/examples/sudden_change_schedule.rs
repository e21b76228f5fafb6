//! Drives the waiting-time scheduler on its own and checks that waiting
//! times and team subsets come out uniform.
//!
//! cargo run --release --example sudden_change_schedule -- [U5-8] [changes]

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamadapt::env::{tick_schedule, EnvKind, ScheduleState, SuddenChangeDist};
use teamadapt::stats::chi_square_test;
use teamadapt::teammates::{Archetype, TeammatePolicy, TeammatePool};

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let dist = SuddenChangeDist::parse(&args.next().unwrap_or_else(|| "U5-8".into()))?;
    let target: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let max_teammates = 2;

    let mut pool = TeammatePool::new(EnvKind::Lbf);
    for (k, a) in [Archetype::NearestFood, Archetype::Follower].into_iter().enumerate() {
        pool.add(TeammatePolicy::scripted(a, 0.0), a.name().into(), k as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ScheduleState { waiting_time: dist.sample(&mut rng), active_team: vec![0, 1], active_group: 0, changes: 0 };
    if dist.label() == "stationary" {
        let mut fired = 0;
        for _ in 0..target {
            let (next, f) = tick_schedule(&s, &dist, max_teammates, &pool, &mut rng);
            fired += f.is_some() as usize;
            s = next;
        }
        println!("stationary: {fired} changes in {target} ticks");
        return Ok(());
    }

    let mut gaps: BTreeMap<i64, u64> = BTreeMap::new();
    let mut teams: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    let mut groups: BTreeMap<usize, u64> = BTreeMap::new();
    let mut since = 0;
    while s.changes < target {
        let (next, fired) = tick_schedule(&s, &dist, max_teammates, &pool, &mut rng);
        since += 1;
        if fired.is_some() {
            // the first gap starts from an arbitrary initial draw, skip it
            if next.changes > 1 {
                *gaps.entry(since).or_default() += 1;
            }
            *teams.entry(next.active_team.clone()).or_default() += 1;
            *groups.entry(next.active_group).or_default() += 1;
            since = 0;
        }
        s = next;
    }
    let report = |name: &str, counts: Vec<u64>| -> teamadapt::Result<()> {
        let total: u64 = counts.iter().sum();
        let expected = vec![total as f64 / counts.len() as f64; counts.len()];
        let (stat, p) = chi_square_test(&counts, &expected)?;
        println!("{name:<13} {counts:?}  chi2 {stat:.2}  p {p:.3}");
        Ok(())
    };
    println!("{} over {target} changes", dist.label());
    report("waiting time", gaps.values().copied().collect())?;
    report("team subset", teams.values().copied().collect())?;
    report("policy group", groups.values().copied().collect())?;
    Ok(())
}
