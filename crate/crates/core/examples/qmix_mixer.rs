//! Monotonic mixing on random inputs: raising one agent's utility never
//! lowers the team value, so per-agent greedy actions are jointly greedy.
//!
//! cargo run --release --example qmix_mixer -- [agents] [actions]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teamadapt::qmix::{mix_with_weights, td_targets, MonotonicMixer};
use teamadapt::tape::ParamStore;
use teamadapt::teammates::argmax_first;

fn main() -> teamadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let a: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let cond_dim = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mixer = MonotonicMixer::new(&mut store, n, cond_dim, 8, &mut rng);

    let mut violations = 0;
    let mut agree = 0;
    let trials = 200;
    for _ in 0..trials {
        let cond: Vec<f64> = (0..cond_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (w1, b1, w2, b2) = mixer.weights(&store, &cond);
        let qs: Vec<Vec<f64>> = (0..n).map(|_| (0..a).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();

        let base: Vec<f64> = qs.iter().map(|q| q[0]).collect();
        let i = rng.random_range(0..n);
        let mut up = base.clone();
        up[i] += rng.random_range(0.0..2.0);
        if mix_with_weights(&up, &w1, &b1, &w2, b2)? < mix_with_weights(&base, &w1, &b1, &w2, b2)? {
            violations += 1;
        }

        // brute force over every joint action
        let mut best = (f64::NEG_INFINITY, vec![]);
        for code in 0..a.pow(n as u32) {
            let joint: Vec<usize> = (0..n).map(|k| code / a.pow(k as u32) % a).collect();
            let q: Vec<f64> = joint.iter().zip(&qs).map(|(&j, q)| q[j]).collect();
            let v = mix_with_weights(&q, &w1, &b1, &w2, b2)?;
            if v > best.0 {
                best = (v, joint);
            }
        }
        let local: Vec<usize> = qs.iter().map(|q| argmax_first(q)).collect();
        agree += (local == best.1) as usize;
    }
    println!("{n} agents x {a} actions: {violations} monotonicity violations, greedy agreement {agree}/{trials}");

    let targets = td_targets(&[0.0, 0.5, 1.0], &[false, false, true], &[2.0, 3.0, 4.0], 0.99);
    println!("TD targets for rewards [0, 0.5, 1] with a terminal last step: {targets:?}");
    Ok(())
}
