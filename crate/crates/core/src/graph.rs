//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Parameters live
//! in a [`ParamStore`] and enter the tape by reference, so building a graph
//! never copies weights. One graph is built per forward pass and dropped
//! afterwards; graphs over a shared store can be built concurrently.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

/// Guard added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices. Vectors are stored as `1 × n` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    LayerNorm(Var, Array2<f64>),
    SoftmaxRows(Var),
    Gelu(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    RowDistance(Var, Var),
    RowCosine(Var, Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A leaf whose gradient is retained by [`Graph::backward`].
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store;
        self.push(Cow::Borrowed(store.get(id)), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Mul(a, b), rg)
    }

    /// `x + row`, with the `1 × n` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(Cow::Owned(v), Op::AddRow(x, row), rg)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(Cow::Owned(v), Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Scale(x, k), rg)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let mut v = self.value(x).clone();
        assert_eq!(factors.len(), v.nrows(), "scale_rows length mismatch");
        for (mut row, &f) in v.rows_mut().into_iter().zip(&factors) {
            row.mapv_inplace(|e| e * f);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::ScaleRows(x, factors), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut inv = Array2::<f64>::zeros((n, 1));
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv[[i, 0]] = is;
            for (o, &e) in out.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (e - mean) * is;
            }
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::LayerNorm(x, inv), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::SoftmaxRows(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Gelu(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Transpose(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::SliceCols(x, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let v = self.value(x).select(Axis(0), &idx);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::GatherRows(x, idx), rg)
    }

    /// Row-major reshape; the element count must be preserved.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape changes element count");
        let flat: Vec<f64> = xv.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Reshape(x), rg)
    }

    /// Row-wise combined distance `‖a−b‖² · (1 − cos(a, b))`, shape `n × 1`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "row_distance shape mismatch");
        let mut out = Array2::<f64>::zeros((av.nrows(), 1));
        for (i, (ra, rb)) in av.rows().into_iter().zip(bv.rows()).enumerate() {
            out[[i, 0]] = combined_distance(ra.as_slice().unwrap(), rb.as_slice().unwrap());
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::RowDistance(a, b), rg)
    }

    /// Row-wise cosine similarity, shape `n × 1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "row_cosine shape mismatch");
        let mut out = Array2::<f64>::zeros((av.nrows(), 1));
        for (i, (ra, rb)) in av.rows().into_iter().zip(bv.rows()).enumerate() {
            out[[i, 0]] = cosine(ra.as_slice().unwrap(), rb.as_slice().unwrap());
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::RowCosine(a, b), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * e);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Mean(x), rg)
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MulRow(x, row) => {
                    if self.rg(*row) {
                        let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, &g * self.value(*row));
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::ScaleRows(x, factors) => {
                    let mut gx = g;
                    for (mut row, &f) in gx.rows_mut().into_iter().zip(factors) {
                        row.mapv_inplace(|e| e * f);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm(x, inv) => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut gx = Array2::<f64>::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let sum_g = gy.sum();
                        let sum_gy = gy.dot(&yr);
                        let is = inv[[i, 0]];
                        for j in 0..y.ncols() {
                            gx[[i, j]] = is / d * (d * gy[j] - sum_g - yr[j] * sum_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Array2::<f64>::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot = g.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv *= gelu_grad(xv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(x) => accumulate(&mut grads, *x, g.t().to_owned()),
                Op::SliceRows(x, start) => {
                    let mut gx = Array2::<f64>::zeros(self.shape(*x));
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::<f64>::zeros(self.shape(*x));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.shape(p).0;
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(s![at..at + n, ..]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.shape(p).1;
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(s![.., at..at + n]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let mut gx = Array2::<f64>::zeros(self.shape(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    accumulate(&mut grads, *x, Array2::from_shape_vec(shape, flat).unwrap());
                }
                Op::RowDistance(a, b) | Op::RowCosine(a, b) => {
                    let distance = matches!(node.op, Op::RowDistance(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Array2::<f64>::zeros(av.dim());
                    let mut gb = Array2::<f64>::zeros(bv.dim());
                    for i in 0..av.nrows() {
                        let (ra, rb) = (av.row(i), bv.row(i));
                        let (da, db) = if distance {
                            combined_distance_grad(ra.as_slice().unwrap(), rb.as_slice().unwrap())
                        } else {
                            cosine_grad(ra.as_slice().unwrap(), rb.as_slice().unwrap())
                        };
                        let gi = g[[i, 0]];
                        for j in 0..av.ncols() {
                            ga[[i, j]] = gi * da[j];
                            gb[[i, j]] = gi * db[j];
                        }
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Square(x) => {
                    let gx = &g * &self.value(*x).mapv(|e| 2.0 * e);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let shape = self.shape(*x);
                    let gx = Array2::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }

        let mut params: Vec<Option<Array2<f64>>> = vec![None; self.store.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                match &mut params[id.0] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Array2<f64>>> {
        self.params
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|e| e * e).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with [`NORM_EPS`] added to each norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((norm(a) + NORM_EPS) * (norm(b) + NORM_EPS))
}

/// `‖a−b‖² · (1 − cos(a, b))`.
pub fn combined_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sq * (1.0 - cosine(a, b))
}

fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let (da, db) = (na + NORM_EPS, nb + NORM_EPS);
    let ab = dot(a, b);
    let denom = da * db;
    // d/da (ab / (da db)) = b / (da db) - ab / (da^2 db) * a / na
    let ka = if na > 0.0 { ab / (da * denom * na) } else { 0.0 };
    let kb = if nb > 0.0 { ab / (db * denom * nb) } else { 0.0 };
    let ga = a.iter().zip(b).map(|(&x, &y)| y / denom - ka * x).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x / denom - kb * y).collect();
    (ga, gb)
}

fn combined_distance_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let cos_factor = 1.0 - cosine(a, b);
    let (ca, cb) = cosine_grad(a, b);
    let ga = (0..a.len())
        .map(|j| cos_factor * 2.0 * (a[j] - b[j]) - sq * ca[j])
        .collect();
    let gb = (0..a.len())
        .map(|j| -cos_factor * 2.0 * (a[j] - b[j]) - sq * cb[j])
        .collect();
    (ga, gb)
}
