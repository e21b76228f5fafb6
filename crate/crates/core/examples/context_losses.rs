//! Optimises free context samples of three clusters under the consistency
//! loss alone: samples pull toward their cluster's moving average while the
//! log-determinant term pushes the averages apart.
//!
//! cargo run --release --example context_losses -- [iterations]

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamadapt::context::{consistency_loss, relational_matrix, update_moving_average, ClusterSamples};
use teamadapt::nn::{standard_normal, Adam};
use teamadapt::stats::mean;
use teamadapt::tape::{ParamStore, Tape};

fn main() -> teamadapt::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let (clusters, per, dim) = (3, 16, 4);
    let (eta, kappa) = (0.05, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..clusters).map(|c| store.add(format!("z{c}"), 0.1 * standard_normal(&mut rng, per, dim))).collect();
    let mut bars: BTreeMap<usize, Vec<f64>> = (0..clusters).map(|c| (c, vec![0.0; dim])).collect();
    let order: Vec<usize> = (0..clusters).collect();
    let mut opt = Adam::new(&store, 0.02, None);

    for it in 0..=iters {
        let mut tape = Tape::new();
        let groups: Vec<ClusterSamples> =
            ids.iter().enumerate().map(|(c, id)| ClusterSamples { cluster: c, samples: tape.param(&store, *id) }).collect();
        let out = consistency_loss(&mut tape, &groups, &bars, &order, eta, kappa, None)?;
        let (loss, pull, log_det) = (tape.scalar(out.loss), tape.scalar(out.pull), tape.scalar(out.log_det));
        for (c, bar) in &out.updated {
            bars.insert(*c, bar.clone());
        }
        if it % (iters / 6).max(1) == 0 {
            let means: Vec<Vec<f64>> = bars.values().cloned().collect();
            let k = relational_matrix(&means, kappa);
            let off: Vec<f64> = (0..clusters).flat_map(|i| (0..clusters).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| k[[i, j]]).collect();
            println!("iter {it:>4}  loss {loss:>8.4}  pull {pull:.4}  log det {log_det:>8.4}  mean off-diagonal similarity {:.4}", mean(&off));
        }
        let g = tape.backward(out.loss);
        opt.apply(&mut store, &g);
    }

    // a plain moving-average step for reference
    let bar = update_moving_average(&[0.0, 0.0], &[1.0, -1.0], eta)?;
    println!("moving average of [0,0] toward [1,-1] with eta {eta}: {bar:?}");
    for (c, b) in &bars {
        println!("cluster {c} average {:?}", b.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
