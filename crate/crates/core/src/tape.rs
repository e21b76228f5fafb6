//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array (rows = batch, columns =
//! features). Parameters live in a [`ParamStore`] and are bound onto a tape
//! once per forward pass; [`Tape::backward`] returns gradients keyed by
//! [`ParamId`].

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of trainable matrices.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrites every value with the corresponding one from `other`.
    ///
    /// Both stores must have been built by the same constructor sequence.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.values.len(), other.values.len(), "param layout mismatch");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients produced by [`Tape::backward`], one optional matrix per parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Array2<f64>>>,
    nodes: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to an arbitrary recorded node.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    LayerNorm(Var, Array2<f64>),
    RowVecMat(Var, Var, usize),
    LogDetSpd(Var, Array2<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records operations for a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Constant input; gradients flow into it but it is never updated.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Binds a parameter, reusing the node if it is already on this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Copies the current value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1×C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    /// Multiplies every column of `a` elementwise by the `R×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1);
        assert_eq!(self.shape(a).0, self.shape(col).0);
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(elu);
        self.push(value, Op::Elu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, `R×C → R×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    /// Column means, `R×C → 1×C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Picks column `idx[r]` from every row `r`, giving an `R×1` node.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len(), "gather index count mismatch");
        let value = Array2::from_shape_fn((idx.len(), 1), |(r, _)| src[[r, idx[r]]]);
        self.push(value, Op::Gather(a, idx.to_vec()))
    }

    /// Stacks rows `idx[0], idx[1], ...` of `a`; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let value = Array2::from_shape_fn((idx.len(), cols), |(r, c)| src[[idx[r], c]]);
        self.push(value, Op::SelectRows(a, idx.to_vec()))
    }

    /// Row-wise maximum over the columns where `mask` is non-zero.
    ///
    /// Rows with an empty mask yield 0 and receive no gradient.
    pub fn masked_max_rows(&mut self, a: Var, mask: &Array2<f64>) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), mask.dim());
        let mut arg = Vec::with_capacity(src.nrows());
        let mut value = Array2::zeros((src.nrows(), 1));
        for r in 0..src.nrows() {
            let mut best: Option<usize> = None;
            for c in 0..src.ncols() {
                if mask[[r, c]] > 0.0 && best.is_none_or(|b| src[[r, c]] > src[[r, b]]) {
                    best = Some(c);
                }
            }
            match best {
                Some(b) => {
                    value[[r, 0]] = src[[r, b]];
                    arg.push(b);
                }
                None => arg.push(usize::MAX),
            }
        }
        self.push(value, Op::MaxRows(a, arg))
    }

    /// Row-wise standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let c = src.ncols() as f64;
        let mut value = src.clone();
        let mut inv_std = Array2::zeros((src.nrows(), 1));
        for (r, mut row) in value.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[[r, 0]] = is;
            row.mapv_inplace(|x| (x - mean) * is);
        }
        self.push(value, Op::LayerNorm(a, inv_std))
    }

    /// Row-wise vector-matrix product.
    ///
    /// `x` is `R×n`, `w` is `R×(n·k)` holding one row-major `n×k` matrix per
    /// row; the result is `R×k` with `out[r] = x[r] · W_r`.
    pub fn row_vec_mat(&mut self, x: Var, w: Var, k: usize) -> Var {
        let (rows, n) = self.shape(x);
        assert_eq!(self.shape(w), (rows, n * k), "row_vec_mat shape mismatch");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut value = Array2::zeros((rows, k));
        for r in 0..rows {
            for i in 0..n {
                let xi = xv[[r, i]];
                for j in 0..k {
                    value[[r, j]] += xi * wv[[r, i * k + j]];
                }
            }
        }
        self.push(value, Op::RowVecMat(x, w, k))
    }

    /// Log-determinant of a symmetric positive definite matrix via Cholesky.
    ///
    /// Returns `None` when the factorization fails.
    pub fn log_det_spd(&mut self, a: Var) -> Option<Var> {
        let m = self.value(a);
        let (logdet, inv) = spd_logdet_inverse(m)?;
        Some(self.push(Array2::from_elem((1, 1), logdet), Op::LogDetSpd(a, inv)))
    }

    /// Runs reverse accumulation from a `1×1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        self.sweep(root, false)
    }

    /// Like [`Tape::backward`] but also retains the gradient of every node,
    /// readable through [`Gradients::wrt`].
    pub fn backward_full(&self, root: Var) -> Gradients {
        self.sweep(root, true)
    }

    fn sweep(&self, root: Var, keep_nodes: bool) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut params: Vec<Option<Array2<f64>>> = Vec::new();
        let mut kept: Vec<Option<Array2<f64>>> =
            if keep_nodes { vec![None; self.nodes.len()] } else { Vec::new() };

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if keep_nodes {
                kept[idx] = Some(g.clone());
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if params.len() <= id.0 {
                        params.resize(id.0 + 1, None);
                    }
                    accumulate(&mut params[id.0], g.clone());
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let gb = -(&ga * &node.value);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * self.value(*row);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::MulCol(a, col) => {
                    let ga = &g * self.value(*col);
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g = if x > 0.0 { *g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .and(&node.value)
                        .for_each(|g, &x, &y| *g *= if x > 0.0 { 1.0 } else { y + 1.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = &g / self.value(*a);
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = &g * self.value(*a) * 2.0;
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = 1.0 / r as f64;
                    let ga = Array2::from_shape_fn((r, c), |(_, j)| g[[0, j]] * inv);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(node.value.rows()) {
                        let gsum = grow.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gi, &y| *gi -= y.exp() * gsum);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(node.value.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gi, &y| *gi = y * (*gi - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] = g[[r, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &c) in arg.iter().enumerate() {
                        if c != usize::MAX {
                            ga[[r, c]] = g[[r, 0]];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let c = y.ncols() as f64;
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / c;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                        let is = inv_std[[r, 0]];
                        for j in 0..y.ncols() {
                            ga[[r, j]] = is * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowVecMat(x, w, k) => {
                    let k = *k;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (rows, n) = xv.dim();
                    let mut gx = Array2::zeros((rows, n));
                    let mut gw = Array2::zeros((rows, n * k));
                    for r in 0..rows {
                        for i in 0..n {
                            let mut sx = 0.0;
                            for j in 0..k {
                                sx += g[[r, j]] * wv[[r, i * k + j]];
                                gw[[r, i * k + j]] = g[[r, j]] * xv[[r, i]];
                            }
                            gx[[r, i]] = sx;
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::LogDetSpd(a, inv) => {
                    // d log det(A) / dA = A^{-T}
                    let ga = inv.t().to_owned() * g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { params, nodes: kept }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    accumulate(&mut grads[v.0], g);
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) if existing.dim() == g.dim() => *existing += &g,
        _ => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Cholesky-based log-determinant and inverse of a symmetric positive definite matrix.
pub fn spd_logdet_inverse(m: &Array2<f64>) -> Option<(f64, Array2<f64>)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "log det of non-square matrix");
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let logdet = 2.0 * (0..n).map(|i| l[[i, i]].ln()).sum::<f64>();
    // inverse of L by forward substitution, then A^{-1} = L^{-T} L^{-1}
    let mut linv = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        linv[[i, i]] = 1.0 / l[[i, i]];
        for j in 0..i {
            let mut sum = 0.0;
            for k in j..i {
                sum -= l[[i, k]] * linv[[k, j]];
            }
            linv[[i, j]] = sum / l[[i, i]];
        }
    }
    let inv = linv.t().dot(&linv);
    Some((logdet, inv))
}
