//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations on 2-D arrays. Leaves are either constants or
//! borrowed entries of a [`ParamStore`]; calling [`Tape::backward`] on a 1x1
//! node returns gradients for every bound store. Constants never receive
//! gradients, so stop-gradient is expressed by copying a value into a new
//! constant with [`Tape::detach`].
//!
//! Every training loop in this crate builds one tape per example (or batch),
//! which keeps tapes thread-local and lets per-example gradients be computed in
//! parallel and summed in a fixed order.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rounds every parameter through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients aligned with the parameters of one store.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }

    /// Sum of squared entries over all slots.
    pub fn sq_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| *x == 0.0))
    }

    /// Sums a sequence of gradient sets in iteration order.
    pub fn sum<'g>(n: usize, parts: impl IntoIterator<Item = &'g Grads>) -> Grads {
        let mut total = Grads::empty(n);
        for p in parts {
            total.accumulate(p);
        }
        total
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter store bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    NormalizeRows(Var),
    LayerNormRows(Var, f64),
}

enum Value<'a> {
    Owned(Mat),
    Borrowed(&'a Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

/// Records a computation for one backward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    stores: Vec<&'a ParamStore>,
    param_nodes: HashMap<(usize, usize), Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            stores: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Binds a parameter store so its entries can be used as leaves.
    pub fn bind(&mut self, store: &'a ParamStore) -> StoreRef {
        self.stores.push(store);
        StoreRef(self.stores.len() - 1)
    }

    /// Leaf for a bound parameter; repeated calls return the same node.
    pub fn param(&mut self, store: StoreRef, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&(store.0, id.0)) {
            return *v;
        }
        let value = self.stores[store.0].get(id);
        let var = self.push(Value::Borrowed(value), Op::Leaf);
        self.param_nodes.insert((store.0, id.0), var);
        var
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Value::Owned(value), Op::Leaf)
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Mat, op: Op) -> Var {
        self.push(Value::Owned(value), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.owned(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.owned(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.owned(v, Op::Add(a, b))
    }

    /// Adds a 1xm row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.owned(v, Op::AddRow(a, row))
    }

    /// Adds an nx1 column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) + self.value(col);
        self.owned(v, Op::AddCol(a, col))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.owned(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.owned(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.owned(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.owned(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.owned(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.owned(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.owned(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.owned(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.owned(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.owned(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.owned(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums across columns, giving an nx1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.owned(v, Op::SumRows(a))
    }

    /// Sums down rows, giving a 1xm row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.owned(v, Op::SumCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.owned(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.owned(v, Op::LogSoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.owned(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.owned(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col counts differ");
        self.owned(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.owned(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.owned(v, Op::SliceRows(a, start, end))
    }

    /// Row lookup (embedding gather); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.owned(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Picks entry `idx[r]` from each row `r`, giving an nx1 column.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let v = Array2::from_shape_fn((idx.len(), 1), |(r, _)| src[[r, idx[r]]]);
        self.owned(v, Op::PickCols(a, idx.to_vec()))
    }

    /// Scales each row to unit L2 norm. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.owned(v, Op::NormalizeRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm_rows(self.value(a), eps);
        self.owned(v, Op::LayerNormRows(a, eps))
    }

    /// Runs the backward pass from a 1x1 `loss`.
    pub fn backward(self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.get();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
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
                Op::AddCol(a, col) => {
                    let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gc);
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
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gi, &x| {
                            if x <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gi, &t| *gi *= 1.0 - t * t);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gi, &s| *gi *= s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * y),
                Op::Log(a) => acc(&mut grads, *a, g / self.value(*a)),
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let ga = g
                        .broadcast(self.value(*a).dim())
                        .expect("sum_rows broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g
                        .broadcast(self.value(*a).dim())
                        .expect("sum_cols broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (&g - &dot) * y;
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(y.mapv(f64::exp) * &gsum);
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, s0, s1) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *s0..*s1]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, s0, s1) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*s0..*s1, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::PickCols(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] += g[[r, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for ((mut grow, yrow), xrow) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows())
                    {
                        let n = xrow.dot(&xrow).sqrt();
                        let gy = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gi, &yi| *gi = (*gi - yi * gy) / n);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let m = x.ncols() as f64;
                    let mut ga = g.clone();
                    for ((mut grow, yrow), xrow) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows())
                    {
                        let mean = xrow.sum() / m;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.sum() / m;
                        let gxy = grow.dot(&yrow) / m;
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gi, &yi| *gi = inv * (*gi - gmean - yi * gxy));
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }

        Gradients {
            grads,
            param_nodes: self.param_nodes,
            store_sizes: self.stores.iter().map(|s| s.len()).collect(),
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    param_nodes: HashMap<(usize, usize), Var>,
    store_sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf (constant or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collects gradients for every parameter of a bound store.
    pub fn params(&mut self, store: StoreRef) -> Grads {
        let mut out = Grads::empty(self.store_sizes[store.0]);
        for (&(s, p), var) in &self.param_nodes {
            if s == store.0 {
                out.slots[p] = self.grads[var.0].take();
            }
        }
        out
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

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

pub fn log_softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn layer_norm_rows(a: &Mat, eps: f64) -> Mat {
    let m = a.ncols() as f64;
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / m;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        let num: f64 = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
        let den = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + b.iter().map(|x| x * x).sum::<f64>().sqrt()
            + 1e-12;
        assert!(num / den < tol, "relative error {} >= {tol}\n{a}\n{b}", num / den);
    }

    /// Builds a scalar from `x` using a closure over the tape and checks the
    /// tape gradient against finite differences.
    fn check_unary(x: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |x: &Mat| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = build(&mut t, v);
        let g = t.backward(out);
        let analytic = g.wrt(v).cloned().unwrap();
        let numeric = numeric_grad(&x, eval);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 3, 4);
        check_unary(x.clone(), |t, v| {
            let a = t.tanh(v);
            let b = t.sigmoid(a);
            let c = t.exp(b);
            let wv = t.constant(w.clone());
            let d = t.mul(c, wv);
            t.sum(d)
        });
        check_unary(x.mapv(|v| v.abs() + 0.5), |t, v| {
            let l = t.ln(v);
            let s = t.square(l);
            t.mean(s)
        });
    }

    #[test]
    fn matmul_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 5);
        let row = rand_mat(&mut rng, 1, 5);
        let col = rand_mat(&mut rng, 3, 1);
        let w = rand_mat(&mut rng, 3, 5);
        check_unary(x.clone(), |t, v| {
            let bv = t.constant(b.clone());
            let m = t.matmul(v, bv);
            let r = t.constant(row.clone());
            let m = t.add_row(m, r);
            let c = t.constant(col.clone());
            let m = t.mul_col(m, c);
            let m = t.add_col(m, c);
            let wv = t.constant(w.clone());
            let m = t.mul(m, wv);
            t.sum(m)
        });
        // gradient through the broadcast operand itself
        check_unary(row.clone(), |t, r| {
            let xv = t.constant(x.dot(&b));
            let m = t.mul_row(xv, r);
            let m = t.add_row(m, r);
            let sq = t.square(m);
            t.sum(sq)
        });
        check_unary(x.clone(), |t, v| {
            let bv = t.constant(b.t().to_owned());
            let m = t.matmul_bt(v, bv);
            let tr = t.transpose(m);
            let s = t.sum_cols(tr);
            let s2 = t.square(s);
            t.sum(s2)
        });
    }

    #[test]
    fn softmax_family_and_normalizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 6);
        let w = rand_mat(&mut rng, 4, 6);
        for which in 0..4 {
            let w = w.clone();
            check_unary(x.clone(), move |t, v| {
                let y = match which {
                    0 => t.softmax_rows(v),
                    1 => t.log_softmax_rows(v),
                    2 => t.normalize_rows(v),
                    _ => t.layer_norm_rows(v, 1e-5),
                };
                let wv = t.constant(w.clone());
                let m = t.mul(y, wv);
                t.sum(m)
            });
        }
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 5, 6);
        check_unary(x.clone(), |t, v| {
            let a = t.slice_cols(v, 1, 4);
            let b = t.slice_rows(v, 0, 2);
            let g = t.gather_rows(v, &[4, 1, 1]);
            let c = t.concat_cols(&[a, a]);
            let p = t.pick_cols(c, &[0, 5, 2, 3, 1]);
            let r = t.concat_rows(&[b, g]);
            let s1 = t.sum_rows(r);
            let s1 = t.square(s1);
            let s1 = t.sum(s1);
            let s2 = t.square(p);
            let s2 = t.sum(s2);
            let rl = t.relu(v);
            let s3 = t.sum(rl);
            let tot = t.add(s1, s2);
            t.add(tot, s3)
        });
    }

    #[test]
    fn detach_blocks_gradient_and_params_collect() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut t = Tape::new();
        let sref = t.bind(&store);
        let wv = t.param(sref, w);
        let again = t.param(sref, w);
        assert_eq!(wv, again);
        let d = t.detach(wv);
        let prod = t.mul(wv, d);
        let loss = t.sum(prod);
        let mut g = t.backward(loss);
        let grads = g.params(sref);
        // d(sum(w * sg[w]))/dw = sg[w]
        assert_eq!(grads.get(w).unwrap(), store.get(w));
    }

    #[test]
    fn grads_accumulate_in_order() {
        let mut a = Grads::empty(2);
        let mut b = Grads::empty(2);
        b.slots[1] = Some(array![[1.0]]);
        a.accumulate(&b);
        a.accumulate(&b);
        assert_eq!(a.get(ParamId(1)).unwrap()[[0, 0]], 2.0);
        assert!(a.get(ParamId(0)).is_none());
        a.scale(0.5);
        assert_eq!(a.sq_norm(), 1.0);
    }
}
