//! Small neural building blocks on top of [`crate::tape`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tape::{ParamId, ParamStore, Tape, Var};

/// Lower bound applied to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Elu => tape.elu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(rng, d_in, d_out, bound));
        let b = store.add(format!("{name}.b"), uniform_init(rng, 1, d_out, bound));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// Feed-forward stack; `act` is applied between layers, not after the last.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], act: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = self.act.apply(tape, h);
            }
        }
        h
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }
}

/// Gated recurrent unit with the reset gate applied after the hidden projection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform_init(rng, d_in, 3 * hidden, bound)),
            w_hh: store.add(format!("{name}.w_hh"), uniform_init(rng, hidden, 3 * hidden, bound)),
            b_ih: store.add(format!("{name}.b_ih"), uniform_init(rng, 1, 3 * hidden, bound)),
            b_hh: store.add(format!("{name}.b_hh"), uniform_init(rng, 1, 3 * hidden, bound)),
            d_in,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b_ih = tape.param(store, self.b_ih);
        let b_hh = tape.param(store, self.b_hh);
        let gi = tape.matmul(x, w_ih);
        let gi = tape.add_row(gi, b_ih);
        let gh = tape.matmul(h, w_hh);
        let gh = tape.add_row(gh, b_hh);

        let i_rz = tape.slice_cols(gi, 0, 2 * hd);
        let h_rz = tape.slice_cols(gh, 0, 2 * hd);
        let rz = tape.add(i_rz, h_rz);
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, hd);
        let z = tape.slice_cols(rz, hd, hd);

        let i_n = tape.slice_cols(gi, 2 * hd, hd);
        let h_n = tape.slice_cols(gh, 2 * hd, hd);
        let rh = tape.mul(r, h_n);
        let n = tape.add(i_n, rh);
        let n = tape.tanh(n);

        // h' = n + z ⊙ (h − n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    pub fn zeros(&self, tape: &mut Tape, rows: usize) -> Var {
        tape.constant(Array2::zeros((rows, self.hidden)))
    }
}

/// Output of a diagonal-Gaussian head.
#[derive(Debug, Clone, Copy)]
pub struct GaussianOut {
    pub mu: Var,
    pub sigma: Var,
}

/// Linear map to `(μ, σ)` with `σ = softplus(·) + SIGMA_FLOOR`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct GaussianHead {
    pub proj: Linear,
    pub dim: usize,
}

impl GaussianHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, dim: usize, rng: &mut R) -> Self {
        Self { proj: Linear::new(store, name, d_in, 2 * dim, rng), dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> GaussianOut {
        let out = self.proj.forward(tape, store, x);
        let mu = tape.slice_cols(out, 0, self.dim);
        let raw = tape.slice_cols(out, self.dim, self.dim);
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        GaussianOut { mu, sigma }
    }
}

/// Reparameterized draw `μ + σ ⊙ ε` with a supplied noise matrix.
pub fn reparameterize(tape: &mut Tape, g: GaussianOut, noise: Array2<f64>) -> Var {
    let eps = tape.constant(noise);
    let scaled = tape.mul(g.sigma, eps);
    tape.add(g.mu, scaled)
}

pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Sum over columns of the diagonal Gaussian log-density, `R×1`.
pub fn gaussian_log_density(tape: &mut Tape, x: Var, g: GaussianOut) -> Var {
    let diff = tape.sub(x, g.mu);
    let ratio = tape.div(diff, g.sigma);
    let sq = tape.square(ratio);
    let half_sq = tape.scale(sq, -0.5);
    let log_sigma = tape.ln(g.sigma);
    let neg_log_sigma = tape.neg(log_sigma);
    let per_dim = tape.add(half_sq, neg_log_sigma);
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let per_dim = tape.add_scalar(per_dim, c);
    tape.sum_cols(per_dim)
}

/// Closed-form entropy of a diagonal Gaussian per row, `R×1`.
pub fn gaussian_entropy(tape: &mut Tape, sigma: Var) -> Var {
    let d = tape.shape(sigma).1 as f64;
    let log_sigma = tape.ln(sigma);
    let s = tape.sum_cols(log_sigma);
    tape.add_scalar(s, 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln()))
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &crate::tape::Gradients) -> f64 {
        let norm = grads.global_norm();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * factor;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
        norm
    }
}

/// One-hot rows for the given indices.
pub fn one_hot(indices: &[usize], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), width));
    for (r, &i) in indices.iter().enumerate() {
        if i < width {
            out[[r, i]] = 1.0;
        }
    }
    out
}
