//! Finite-difference verification of tape gradients.

use ndarray::Array2;

use crate::tape::{ParamStore, Tape, Var};

/// Worst disagreement found by [`check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor so that near-zero gradients do not
/// blow up the ratio.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `f` against a
/// five-point central difference for every `stride`-th parameter entry.
///
/// `f` must rebuild the scalar from scratch on the given store; any noise it
/// uses has to be fixed outside.
pub fn check_params(store: &ParamStore, h: f64, stride: usize, floor: f64, f: impl Fn(&mut Tape, &ParamStore) -> Var) -> GradReport {
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let o = f(&mut t, s);
        t.scalar(o)
    };
    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    let mut work = store.clone();
    let mut counter = 0usize;
    for id in store.ids() {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).dim()));
        let cols = store.get(id).ncols();
        for idx in 0..store.get(id).len() {
            counter += 1;
            if !(counter - 1).is_multiple_of(stride.max(1)) {
                continue;
            }
            let (r, c) = (idx / cols, idx % cols);
            let x0 = store.get(id)[[r, c]];
            let mut at = |dx: f64| {
                work.get_mut(id)[[r, c]] = x0 + dx;
                eval(&work)
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            work.get_mut(id)[[r, c]] = x0;
            let err = rel_err(analytic[[r, c]], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}[{r},{c}] analytic {} numeric {numeric}", store.name(id), analytic[[r, c]]);
            }
        }
    }
    report
}
