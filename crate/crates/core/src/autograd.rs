//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are
//! either constants (no gradient is ever computed for them), tracked
//! parameters identified by a [`ParamKey`], or tracked inputs. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! the tracked leaves only; nodes that cannot reach a tracked leaf are
//! skipped entirely, so frozen parameters inserted as constants never get a
//! gradient path.
//!
//! Every value is an `Array2<T>`; scalars are `[1, 1]` and per-channel
//! rows are `[1, n]`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::real::Real;

/// Identifies a tracked leaf: a parameter in a store, or a graph input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub index: u32,
}

impl ParamKey {
    pub const INPUT_STORE: u32 = u32::MAX;

    pub fn input(index: u32) -> Self {
        Self { store: Self::INPUT_STORE, index }
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Precomputed rotary cosines/sines, `[tokens, head_dim / 2]`.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub cos: Array2<T>,
    pub sin: Array2<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn from_angles(angles: &Array2<f64>) -> Self {
        Self {
            cos: angles.mapv(|a| T::of(a.cos())),
            sin: angles.mapv(|a| T::of(a.sin())),
        }
    }

    pub fn tokens(&self) -> usize {
        self.cos.nrows()
    }
}

enum Value<'p, T> {
    Owned(Array2<T>),
    Borrowed(&'p Array2<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Array2<T> {
        match self {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }
}

enum Op<T> {
    Constant,
    Tracked(ParamKey),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Modulate { x: Var, shift: Var, scale: Var },
    AddGated { x: Var, gate: Var, branch: Var },
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    L2NormHeads { x: Var, head_dim: usize, norms: Vec<T> },
    HeadScale { x: Var, scale: Var, head_dim: usize },
    Rope { x: Var, table: Arc<RopeTable<T>>, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, logit_scale: T, probs: Vec<Array2<T>> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Mse { pred: Var, target: Array2<T> },
    WeightedSum { x: Var, weights: Array2<T> },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of tracked leaves, keyed in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamKey, Array2<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&Array2<T>> {
        self.map.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Array2<T>)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Gradients belonging to one parameter store, indexed by parameter.
    pub fn for_store(&self, store: u32) -> impl Iterator<Item = (u32, &Array2<T>)> {
        self.map
            .iter()
            .filter(move |(k, _)| k.store == store)
            .map(|(k, v)| (k.index, v))
    }

    /// Adds `other` into `self` (keys merged in sorted order).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => *acc += g,
                None => {
                    self.map.insert(*k, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(crate::real::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs().f64()))
    }
}

/// One forward pass recorded for differentiation.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    tracked: HashMap<ParamKey, Var>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_sum<T: Real>(a: &Array2<T>) -> Array2<T> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256), tracked: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'p, T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        self.nodes[v.0].value.get()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, a: Array2<T>) -> Var {
        self.push(Value::Owned(a), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, a: &'p Array2<T>) -> Var {
        self.push(Value::Borrowed(a), Op::Constant, false)
    }

    /// Tracked parameter leaf. Repeated calls with the same key share a node.
    pub fn param(&mut self, key: ParamKey, a: &'p Array2<T>) -> Var {
        if let Some(v) = self.tracked.get(&key) {
            return *v;
        }
        let v = self.push(Value::Borrowed(a), Op::Tracked(key), true);
        self.tracked.insert(key, v);
        v
    }

    /// Tracked owned leaf, e.g. an input whose gradient is wanted.
    pub fn input(&mut self, key: ParamKey, a: Array2<T>) -> Var {
        let v = self.push(Value::Owned(a), Op::Tracked(key), true);
        self.tracked.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Value::Owned(y), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Value::Owned(y), Op::Add(a, b), ng)
    }

    /// `x + row`, where `row` is `[1, n]` and broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let y = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(Value::Owned(y), Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Value::Owned(y), Op::Mul(a, b), ng)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let y = self.value(x) * self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(Value::Owned(y), Op::MulRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).mapv(|v| v * c);
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::Scale(x, c), ng)
    }

    /// `x * (1 + scale) + shift` with `[1, n]` shift/scale rows.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let mut y = self.value(scale).mapv(|s| T::one() + s) * self.value(x);
        y += self.value(shift);
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        self.push(Value::Owned(y), Op::Modulate { x, shift, scale }, ng)
    }

    /// `x + gate * branch`, gate a `[1, n]` row.
    pub fn add_gated(&mut self, x: Var, gate: Var, branch: Var) -> Var {
        let mut y = self.value(branch) * self.value(gate);
        y += self.value(x);
        let ng = self.ng(x) || self.ng(gate) || self.ng(branch);
        self.push(Value::Owned(y), Op::AddGated { x, gate, branch }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::Silu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let half = T::of(0.5);
        let y = self
            .value(x)
            .mapv(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::Gelu(x), ng)
    }

    /// Per-row normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.ncols() as f64);
        let mut y = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::LayerNorm { x, inv_std }, ng)
    }

    /// L2-normalizes each `head_dim` chunk of every row.
    pub fn l2_norm_heads(&mut self, x: Var, head_dim: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ncols() % head_dim, 0, "l2_norm_heads: width not divisible by head_dim");
        let heads = xv.ncols() / head_dim;
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows() * heads);
        let eps = T::of(1e-12);
        for mut row in y.rows_mut() {
            for h in 0..heads {
                let mut chunk = row.slice_mut(s![h * head_dim..(h + 1) * head_dim]);
                let n = (chunk.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                chunk.mapv_inplace(|v| v / n);
                norms.push(n);
            }
        }
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::L2NormHeads { x, head_dim, norms }, ng)
    }

    /// Multiplies each head chunk by its entry of a `[1, heads]` scale row.
    pub fn head_scale(&mut self, x: Var, scale: Var, head_dim: usize) -> Var {
        let sv = self.value(scale);
        let mut y = self.value(x).clone();
        for h in 0..sv.ncols() {
            let c = sv[[0, h]];
            y.slice_mut(s![.., h * head_dim..(h + 1) * head_dim]).mapv_inplace(|v| v * c);
        }
        let ng = self.ng(x) || self.ng(scale);
        self.push(Value::Owned(y), Op::HeadScale { x, scale, head_dim }, ng)
    }

    /// Rotates consecutive channel pairs of every head by the table angles.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<T>>, head_dim: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(table.tokens(), xv.nrows(), "rope: table/token count mismatch");
        assert_eq!(table.cos.ncols() * 2, head_dim, "rope: table/head_dim mismatch");
        let y = rotate(xv, &table, head_dim, false);
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::Rope { x, table, head_dim }, ng)
    }

    /// Multi-head softmax attention; `q`, `k`, `v` share width `heads * head_dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, logit_scale: T) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.ncols(), kv.ncols(), "attention: q/k width mismatch");
        assert_eq!(kv.nrows(), vv.nrows(), "attention: k/v length mismatch");
        assert_eq!(qv.ncols() % heads, 0, "attention: width not divisible by heads");
        let hd = qv.ncols() / heads;
        let vd = vv.ncols() / heads;
        let mut out = Array2::<T>::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qv.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = kv.slice(s![.., h * hd..(h + 1) * hd]);
            let vh = vv.slice(s![.., h * vd..(h + 1) * vd]);
            let mut p = qh.dot(&kh.t());
            p.mapv_inplace(|x| x * logit_scale);
            softmax_rows(&mut p);
            out.slice_mut(s![.., h * vd..(h + 1) * vd]).assign(&p.dot(&vh));
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Value::Owned(out),
            Op::Attention { q, k, v, heads, logit_scale, probs },
            ng,
        )
    }

    /// Attention nodes in creation order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. })).map(Var).collect()
    }

    /// Attention probabilities of head `h` for an attention node.
    pub fn attention_probs(&self, v: Var, h: usize) -> Option<&Array2<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => probs.get(h),
            _ => None,
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Value::Owned(y), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(Value::Owned(y), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Value::Owned(y), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut y = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            y.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(Value::Owned(y), Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Mean squared error against a constant target, as a `[1, 1]` node.
    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse: shape mismatch");
        let n = T::of(p.len() as f64);
        let loss = Zip::from(p).and(&target).fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b)) / n;
        let ng = self.ng(pred);
        self.push(Value::Owned(Array2::from_elem((1, 1), loss)), Op::Mse { pred, target }, ng)
    }

    /// `sum(x * weights)` as a `[1, 1]` node.
    pub fn weighted_sum(&mut self, x: Var, weights: Array2<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), weights.dim(), "weighted_sum: shape mismatch");
        let y = Zip::from(xv).and(&weights).fold(T::zero(), |acc, &a, &b| acc + a * b);
        let ng = self.ng(x);
        self.push(Value::Owned(Array2::from_elem((1, 1), y)), Op::WeightedSum { x, weights }, ng)
    }

    /// Backpropagates from a `[1, 1]` output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).dim(), (1, 1), "backward: output must be scalar");
        self.backward_with(out, Array2::from_elem((1, 1), T::one()))
    }

    /// Backpropagates an explicit upstream gradient `seed`.
    pub fn backward_with(&self, out: Var, seed: Array2<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result = Gradients::default();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Acc { nodes: &self.nodes, grads: &mut grads };
            match &node.op {
                Op::Constant => {}
                Op::Tracked(key) => {
                    result.map.insert(*key, g);
                }
                Op::MatMul(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.dot(&self.value(*b).t()));
                    }
                    if acc.wants(*b) {
                        acc.add(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.clone());
                    }
                    if acc.wants(*b) {
                        acc.add(*b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if acc.wants(*row) {
                        acc.add(*row, row_sum(&g));
                    }
                    if acc.wants(*x) {
                        acc.add(*x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, &g * self.value(*b));
                    }
                    if acc.wants(*b) {
                        acc.add(*b, &g * self.value(*a));
                    }
                }
                Op::MulRow(x, row) => {
                    if acc.wants(*row) {
                        acc.add(*row, row_sum(&(&g * self.value(*x))));
                    }
                    if acc.wants(*x) {
                        acc.add(*x, &g * self.value(*row));
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc.add(*x, g.mapv(|v| v * c));
                }
                Op::Modulate { x, shift, scale } => {
                    if acc.wants(*scale) {
                        acc.add(*scale, row_sum(&(&g * self.value(*x))));
                    }
                    if acc.wants(*shift) {
                        acc.add(*shift, row_sum(&g));
                    }
                    if acc.wants(*x) {
                        acc.add(*x, &g * &self.value(*scale).mapv(|s| T::one() + s));
                    }
                }
                Op::AddGated { x, gate, branch } => {
                    if acc.wants(*gate) {
                        acc.add(*gate, row_sum(&(&g * self.value(*branch))));
                    }
                    if acc.wants(*branch) {
                        acc.add(*branch, &g * self.value(*gate));
                    }
                    if acc.wants(*x) {
                        acc.add(*x, g);
                    }
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        let sg = sigmoid(xv);
                        *gv = *gv * sg * (T::one() + xv * (T::one() - sg));
                    });
                    acc.add(*x, gx);
                }
                Op::Gelu(x) => {
                    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
                    let three = T::of(3.0);
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        let th = (c * (xv + k * xv * xv * xv)).tanh();
                        let d = half * (T::one() + th)
                            + half * xv * (T::one() - th * th) * c * (T::one() + three * k * xv * xv);
                        *gv = *gv * d;
                    });
                    acc.add(*x, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.get();
                    let n = T::of(y.ncols() as f64);
                    let mut gx = g;
                    for ((mut grow, yrow), &inv) in gx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let sum_g = grow.sum();
                        let sum_gy = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| {
                            *gv = inv * (*gv - sum_g / n - yv * sum_gy / n);
                        });
                    }
                    acc.add(*x, gx);
                }
                Op::L2NormHeads { x, head_dim, norms } => {
                    let y = node.value.get();
                    let heads = y.ncols() / head_dim;
                    let mut gx = g;
                    for (r, (mut grow, yrow)) in gx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                        for h in 0..heads {
                            let sl = s![h * head_dim..(h + 1) * head_dim];
                            let n = norms[r * heads + h];
                            let yc = yrow.slice(sl);
                            let mut gc = grow.slice_mut(sl);
                            let dot = gc.iter().zip(yc.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            Zip::from(&mut gc).and(&yc).for_each(|gv, &yv| *gv = (*gv - yv * dot) / n);
                        }
                    }
                    acc.add(*x, gx);
                }
                Op::HeadScale { x, scale, head_dim } => {
                    let sv = self.value(*scale);
                    let hd = *head_dim;
                    if acc.wants(*scale) {
                        let xv = self.value(*x);
                        let mut gs = Array2::zeros((1, sv.ncols()));
                        for h in 0..sv.ncols() {
                            let sl = s![.., h * hd..(h + 1) * hd];
                            gs[[0, h]] = Zip::from(g.slice(sl))
                                .and(xv.slice(sl))
                                .fold(T::zero(), |a, &gv, &xv| a + gv * xv);
                        }
                        acc.add(*scale, gs);
                    }
                    if acc.wants(*x) {
                        let mut gx = g;
                        for h in 0..sv.ncols() {
                            let c = sv[[0, h]];
                            gx.slice_mut(s![.., h * hd..(h + 1) * hd]).mapv_inplace(|v| v * c);
                        }
                        acc.add(*x, gx);
                    }
                }
                Op::Rope { x, table, head_dim } => {
                    acc.add(*x, rotate(&g, table, *head_dim, true));
                }
                Op::Attention { q, k, v, heads, logit_scale, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let hd = qv.ncols() / heads;
                    let vd = vv.ncols() / heads;
                    let mut gq = Array2::<T>::zeros(qv.dim());
                    let mut gk = Array2::<T>::zeros(kv.dim());
                    let mut gv = Array2::<T>::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let go = g.slice(s![.., h * vd..(h + 1) * vd]);
                        let vh = vv.slice(s![.., h * vd..(h + 1) * vd]);
                        gv.slice_mut(s![.., h * vd..(h + 1) * vd]).assign(&p.t().dot(&go));
                        let gp = go.dot(&vh.t());
                        // softmax backward: ds = p * (gp - rowsum(gp * p))
                        let mut ds = gp;
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot) * *logit_scale);
                        }
                        let qh = qv.slice(s![.., h * hd..(h + 1) * hd]);
                        let kh = kv.slice(s![.., h * hd..(h + 1) * hd]);
                        gq.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&ds.dot(&kh));
                        gk.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&ds.t().dot(&qh));
                    }
                    if acc.wants(*q) {
                        acc.add(*q, gq);
                    }
                    if acc.wants(*k) {
                        acc.add(*k, gk);
                    }
                    if acc.wants(*v) {
                        acc.add(*v, gv);
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc.add(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if acc.wants(*p) {
                            acc.add(*p, g.slice(s![off..off + n, ..]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc.add(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if acc.wants(*p) {
                            acc.add(*p, g.slice(s![.., off..off + n]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(i);
                    }
                    acc.add(*table, gt);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let c = g[[0, 0]] * T::of(2.0) / T::of(p.len() as f64);
                    let gp = Zip::from(p).and(target).map_collect(|&a, &b| (a - b) * c);
                    acc.add(*pred, gp);
                }
                Op::WeightedSum { x, weights } => {
                    let c = g[[0, 0]];
                    acc.add(*x, weights.mapv(|w| w * c));
                }
            }
        }
        result
    }
}

struct Acc<'a, 'p, T> {
    nodes: &'a [Node<'p, T>],
    grads: &'a mut [Option<Array2<T>>],
}

impl<T: Real> Acc<'_, '_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add(&mut self, v: Var, g: Array2<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows<T: Real>(a: &mut Array2<T>) {
    for mut row in a.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Pairwise rotation of every head chunk; `inverse` rotates by `-angle`.
pub fn rotate<T: Real>(x: &Array2<T>, table: &RopeTable<T>, head_dim: usize, inverse: bool) -> Array2<T> {
    let pairs = head_dim / 2;
    let heads = x.ncols() / head_dim;
    let mut y = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        for h in 0..heads {
            let base = h * head_dim;
            for i in 0..pairs {
                let (c, mut sn) = (table.cos[[r, i]], table.sin[[r, i]]);
                if inverse {
                    sn = -sn;
                }
                let a = x[[r, base + 2 * i]];
                let b = x[[r, base + 2 * i + 1]];
                y[[r, base + 2 * i]] = a * c - b * sn;
                y[[r, base + 2 * i + 1]] = a * sn + b * c;
            }
        }
    }
    y
}
