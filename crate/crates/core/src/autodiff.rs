//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a Wengert list of matrix operations; [`Tape::backward`]
//! walks it once and returns gradients for every parameter leaf. All values
//! are dense `Array2<f64>`, scalars are `1×1` matrices. The op set is exactly
//! what the pipeline needs: affine algebra, smooth pointwise nonlinearities,
//! masked softmax, pooling, row gathering and the gradient-reversal
//! connection used for adversarial training.
//!
//! Every op's backward rule is verified against central finite differences in
//! this module's tests.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{concatenate, Array2, Axis};

pub type Value = Array2<f64>;

/// Hard-exclusion threshold for additive attention masks: entries at or
/// below this value are treated as fully masked and receive exact zero
/// probability (not merely a tiny one).
pub const MASK_EXCLUDE: f64 = -1e30;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBroadcast(usize, usize),
    MulRowBroadcast(usize, usize),
    AddColBroadcast(usize, usize),
    MulColBroadcast(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    // The mask is applied at recording time and is constant, so backward
    // only needs the logits parent.
    SoftmaxRows { x: usize },
    LogSoftmaxRows(usize),
    SumAll(usize),
    SumCols(usize),
    SumRows(usize),
    MeanPoolGroups { x: usize, group: usize },
    MaxPoolGroups { x: usize, group: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize, end: usize },
    GatherRows { x: usize, index: Vec<usize> },
    NormalizeRows(usize),
    LayerNormRows { x: usize, eps: f64 },
    GradReverse { x: usize, coeff: f64 },
    Detach,
}

struct Node {
    value: Value,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, usize>,
}

/// Recording tape. Create one per forward pass; drop it to free the graph.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                param_leaves: HashMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Value) -> Var<'_> {
        self.push(value, Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Value::from_elem((1, 1), v))
    }

    /// Parameter leaf. Repeated calls with the same id return the same node,
    /// so a parameter used in several places accumulates one gradient.
    pub fn param(&self, param_id: usize, value: Value) -> Var<'_> {
        if let Some(&id) = self.inner.borrow().param_leaves.get(&param_id) {
            return Var { tape: self, id };
        }
        let var = self.push(value, Op::Param(param_id));
        self.inner
            .borrow_mut()
            .param_leaves
            .insert(param_id, var.id);
        var
    }

    fn value_of(&self, id: usize) -> Value {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        let inner = self.inner.borrow();
        let s = inner.nodes[id].value.dim();
        s
    }

    /// Reverse sweep from a scalar loss. Returns accumulated gradients per
    /// parameter id. Constants receive no gradient.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        let (r, c) = inner.nodes[loss.id].value.dim();
        assert!(r == 1 && c == 1, "backward requires a scalar loss node");

        let mut grads: Vec<Option<Value>> = Vec::new();
        grads.resize_with(inner.nodes.len(), || None);
        grads[loss.id] = Some(Value::from_elem((1, 1), 1.0));
        let mut params: HashMap<usize, Value> = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            match &node.op {
                Op::Const | Op::Detach => {}
                Op::Param(pid) => match params.get_mut(pid) {
                    Some(acc) => *acc += &g,
                    None => {
                        params.insert(*pid, g);
                    }
                },
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let va = &inner.nodes[*a].value;
                    let vb = &inner.nodes[*b].value;
                    acc(&mut grads, *a, &g * vb);
                    acc(&mut grads, *b, &g * va);
                }
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let va = &inner.nodes[*a].value;
                    let vb = &inner.nodes[*b].value;
                    acc(&mut grads, *a, g.dot(&vb.t()));
                    acc(&mut grads, *b, va.t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::AddRowBroadcast(a, r) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRowBroadcast(a, r) => {
                    let va = &inner.nodes[*a].value;
                    let vr = &inner.nodes[*r].value;
                    acc(&mut grads, *a, &g * vr);
                    acc(
                        &mut grads,
                        *r,
                        (&g * va).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                Op::AddColBroadcast(a, c) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::MulColBroadcast(a, c) => {
                    let va = &inner.nodes[*a].value;
                    let vc = &inner.nodes[*c].value;
                    acc(&mut grads, *a, &g * vc);
                    acc(
                        &mut grads,
                        *c,
                        (&g * va).sum_axis(Axis(1)).insert_axis(Axis(1)),
                    );
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => {
                    let va = &inner.nodes[*a].value;
                    acc(&mut grads, *a, &g / va);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let mut d = g;
                    d.zip_mut_with(y, |gi, &yi| {
                        *gi = if yi == 0.0 { 0.0 } else { *gi * 0.5 / yi };
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let va = &inner.nodes[*a].value;
                    acc(&mut grads, *a, &g * &(va * 2.0));
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &inner.nodes[*a].value;
                    let mut d = g;
                    d.zip_mut_with(va, |gi, &xi| {
                        if xi <= *lo || xi >= *hi {
                            *gi = 0.0;
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows { x } => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, &gy - &(y * &dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let rowsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g - &(&p * &rowsum));
                }
                Op::SumAll(a) => {
                    let (m, n) = inner.nodes[*a].value.dim();
                    acc(&mut grads, *a, Value::from_elem((m, n), g[(0, 0)]));
                }
                Op::SumCols(a) => {
                    let (m, n) = inner.nodes[*a].value.dim();
                    let mut d = Value::zeros((m, n));
                    for i in 0..m {
                        d.row_mut(i).fill(g[(i, 0)]);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SumRows(a) => {
                    let (m, n) = inner.nodes[*a].value.dim();
                    let mut d = Value::zeros((m, n));
                    for i in 0..m {
                        for j in 0..n {
                            d[(i, j)] = g[(0, j)];
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanPoolGroups { x, group } => {
                    let (m, n) = inner.nodes[*x].value.dim();
                    let mut d = Value::zeros((m, n));
                    let inv = 1.0 / *group as f64;
                    for i in 0..m {
                        let gi = i / group;
                        for j in 0..n {
                            d[(i, j)] = g[(gi, j)] * inv;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::MaxPoolGroups { x, group } => {
                    let vx = &inner.nodes[*x].value;
                    let (m, n) = vx.dim();
                    let mut d = Value::zeros((m, n));
                    let groups = m / group;
                    for gi in 0..groups {
                        for j in 0..n {
                            // first-maximum tie break, matching forward
                            let mut best = gi * group;
                            for i in gi * group + 1..(gi + 1) * group {
                                if vx[(i, j)] > vx[(best, j)] {
                                    best = i;
                                }
                            }
                            d[(best, j)] += g[(gi, j)];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = inner.nodes[p].value.ncols();
                        let piece = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        acc(&mut grads, p, piece);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = inner.nodes[p].value.nrows();
                        let piece = g.slice(ndarray::s![start..start + h, ..]).to_owned();
                        acc(&mut grads, p, piece);
                        start += h;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let (m, n) = inner.nodes[*x].value.dim();
                    let mut d = Value::zeros((m, n));
                    d.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, d);
                }
                Op::GatherRows { x, index } => {
                    let (m, n) = inner.nodes[*x].value.dim();
                    let mut d = Value::zeros((m, n));
                    for (out_row, &src) in index.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(out_row);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::NormalizeRows(a) => {
                    let vx = &inner.nodes[*a].value;
                    let y = &node.value;
                    let (m, _) = vx.dim();
                    let mut d = g;
                    for i in 0..m {
                        let norm = vx.row(i).dot(&vx.row(i)).sqrt().max(NORM_FLOOR);
                        let yi = y.row(i).to_owned();
                        let gi = d.row(i).to_owned();
                        let proj = gi.dot(&yi);
                        let new = (&gi - &(&yi * proj)) / norm;
                        d.row_mut(i).assign(&new);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNormRows { x, eps } => {
                    let vx = &inner.nodes[*x].value;
                    let y = &node.value;
                    let (m, n) = vx.dim();
                    let mut d = g;
                    for i in 0..m {
                        let mean = vx.row(i).mean().unwrap();
                        let var = vx.row(i).mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let sigma = (var + eps).sqrt();
                        let gi = d.row(i).to_owned();
                        let yi = y.row(i).to_owned();
                        let g_mean = gi.mean().unwrap();
                        let gy_mean = (&gi * &yi).mean().unwrap();
                        let _ = n;
                        let new = (&gi - g_mean - &(&yi * gy_mean)) / sigma;
                        d.row_mut(i).assign(&new);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::GradReverse { x, coeff } => acc(&mut grads, *x, &g * (-*coeff)),
            }
        }

        Gradients { params }
    }
}

fn acc(grads: &mut [Option<Value>], id: usize, delta: Value) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients of a scalar loss with respect to parameter leaves.
pub struct Gradients {
    params: HashMap<usize, Value>,
}

impl Gradients {
    pub fn param(&self, param_id: usize) -> Option<&Value> {
        self.params.get(&param_id)
    }

    pub fn into_map(self) -> HashMap<usize, Value> {
        self.params
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Value {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), o.shape(), "add shape mismatch");
        let v = &self.value() + &o.value();
        self.tape.push(v, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), o.shape(), "sub shape mismatch");
        let v = &self.value() - &o.value();
        self.tape.push(v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), o.shape(), "mul shape mismatch");
        let v = &self.value() * &o.value();
        self.tape.push(v, Op::Mul(self.id, o.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = -self.value();
        self.tape.push(v, Op::Neg(self.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value() * k;
        self.tape.push(v, Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.value() + k;
        self.tape.push(v, Op::AddScalar(self.id))
    }

    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        let (_, k1) = self.shape();
        let (k2, _) = o.shape();
        assert_eq!(k1, k2, "matmul inner dimension mismatch");
        let v = self.value().dot(&o.value());
        self.tape.push(v, Op::MatMul(self.id, o.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.tape.push(v, Op::Transpose(self.id))
    }

    /// `self (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        assert_eq!(row.shape().0, 1);
        assert_eq!(self.shape().1, row.shape().1);
        let v = &self.value() + &row.value();
        self.tape.push(v, Op::AddRowBroadcast(self.id, row.id))
    }

    /// `self (m×n) ∘ row (1×n)` broadcast over rows.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        assert_eq!(row.shape().0, 1);
        assert_eq!(self.shape().1, row.shape().1);
        let v = &self.value() * &row.value();
        self.tape.push(v, Op::MulRowBroadcast(self.id, row.id))
    }

    /// `self (m×n) + col (m×1)` broadcast over columns.
    pub fn add_col(self, col: Var<'t>) -> Var<'t> {
        assert_eq!(col.shape().1, 1);
        assert_eq!(self.shape().0, col.shape().0);
        let v = &self.value() + &col.value();
        self.tape.push(v, Op::AddColBroadcast(self.id, col.id))
    }

    /// `self (m×n) ∘ col (m×1)` broadcast over columns.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        assert_eq!(col.shape().1, 1);
        assert_eq!(self.shape().0, col.shape().0);
        let v = &self.value() * &col.value();
        self.tape.push(v, Op::MulColBroadcast(self.id, col.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.push(v, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.tape.push(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.tape.push(v, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.tape.push(v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.tape.push(v, Op::Square(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        self.tape.push(v, Op::Clamp(self.id, lo, hi))
    }

    /// Row-wise softmax. `mask` is an additive constant mask; entries at or
    /// below [`MASK_EXCLUDE`] are hard-excluded and get probability exactly 0.
    /// Rows where everything is excluded come out all-zero.
    pub fn softmax_rows(self, mask: Option<Var<'t>>) -> Var<'t> {
        let x = self.value();
        let maskv = mask.map(|m| {
            assert_eq!(m.shape(), self.shape(), "softmax mask shape mismatch");
            m.value()
        });
        let (m, n) = x.dim();
        let mut y = Value::zeros((m, n));
        for i in 0..m {
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                let excluded = maskv.as_ref().is_some_and(|mv| mv[(i, j)] <= MASK_EXCLUDE);
                if !excluded {
                    let l = x[(i, j)] + maskv.as_ref().map_or(0.0, |mv| mv[(i, j)]);
                    hi = hi.max(l);
                }
            }
            if hi == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..n {
                let excluded = maskv.as_ref().is_some_and(|mv| mv[(i, j)] <= MASK_EXCLUDE);
                if !excluded {
                    let l = x[(i, j)] + maskv.as_ref().map_or(0.0, |mv| mv[(i, j)]);
                    let e = (l - hi).exp();
                    y[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                y[(i, j)] /= sum;
            }
        }
        self.tape.push(y, Op::SoftmaxRows { x: self.id })
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dim();
        let mut y = Value::zeros((m, n));
        for i in 0..m {
            let hi = x.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = x.row(i).iter().map(|&v| (v - hi).exp()).sum::<f64>().ln() + hi;
            for j in 0..n {
                y[(i, j)] = x[(i, j)] - lse;
            }
        }
        self.tape.push(y, Op::LogSoftmaxRows(self.id))
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = Value::from_elem((1, 1), self.value().sum());
        self.tape.push(v, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let (m, n) = self.shape();
        self.sum_all().scale(1.0 / (m * n) as f64)
    }

    /// `(m×n) → (m×1)`, summing each row.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(v, Op::SumCols(self.id))
    }

    /// `(m×n) → (1×n)`, summing each column.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(v, Op::SumRows(self.id))
    }

    /// Mean over consecutive row groups of size `group`: `(G·group × n) → (G × n)`.
    pub fn mean_pool_groups(self, group: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dim();
        assert!(group >= 1 && m % group == 0, "bad group size for mean pool");
        let groups = m / group;
        let mut y = Value::zeros((groups, n));
        for gi in 0..groups {
            for i in gi * group..(gi + 1) * group {
                for j in 0..n {
                    y[(gi, j)] += x[(i, j)];
                }
            }
        }
        y /= group as f64;
        self.tape.push(
            y,
            Op::MeanPoolGroups {
                x: self.id,
                group,
            },
        )
    }

    /// Columnwise max over consecutive row groups of size `group`.
    /// Ties route gradient to the first maximal row.
    pub fn max_pool_groups(self, group: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dim();
        assert!(group >= 1 && m % group == 0, "bad group size for max pool");
        let groups = m / group;
        let mut y = Value::zeros((groups, n));
        for gi in 0..groups {
            for j in 0..n {
                let mut best = x[(gi * group, j)];
                for i in gi * group + 1..(gi + 1) * group {
                    if x[(i, j)] > best {
                        best = x[(i, j)];
                    }
                }
                y[(gi, j)] = best;
            }
        }
        self.tape.push(
            y,
            Op::MaxPoolGroups {
                x: self.id,
                group,
            },
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let (_, n) = self.shape();
        assert!(start < end && end <= n, "slice out of range");
        let v = self.value().slice(ndarray::s![.., start..end]).to_owned();
        self.tape.push(
            v,
            Op::SliceCols {
                x: self.id,
                start,
                end,
            },
        )
    }

    /// Row gather: output row `i` is input row `index[i]`. Backward scatters
    /// with accumulation, so repeated indices are fine.
    pub fn gather_rows(self, index: &[usize]) -> Var<'t> {
        let x = self.value();
        let (m, n) = x.dim();
        let mut y = Value::zeros((index.len(), n));
        for (i, &src) in index.iter().enumerate() {
            assert!(src < m, "gather index out of range");
            y.row_mut(i).assign(&x.row(src));
        }
        self.tape.push(
            y,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
        )
    }

    /// L2-normalize each row (norm floor 1e-12).
    pub fn normalize_rows(self) -> Var<'t> {
        let x = self.value();
        let (m, _) = x.dim();
        let mut y = x.clone();
        for i in 0..m {
            let norm = x.row(i).dot(&x.row(i)).sqrt().max(NORM_FLOOR);
            let mut row = y.row_mut(i);
            row /= norm;
        }
        self.tape.push(y, Op::NormalizeRows(self.id))
    }

    /// Standardize each row to zero mean, unit variance.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (m, _) = x.dim();
        let mut y = x.clone();
        for i in 0..m {
            let mean = x.row(i).mean().unwrap();
            let var = x.row(i).mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let sigma = (var + eps).sqrt();
            let mut row = y.row_mut(i);
            row -= mean;
            row /= sigma;
        }
        self.tape.push(y, Op::LayerNormRows { x: self.id, eps })
    }

    /// Identity forward; backward multiplies the incoming gradient by `-coeff`.
    pub fn grad_reverse(self, coeff: f64) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::GradReverse { x: self.id, coeff })
    }

    /// Cut the graph: forward value passes, gradient stops here.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::Detach)
    }
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
    tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(0), &views).expect("concat_rows col mismatch");
    tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&Value) -> f64, x: &Value, eps: f64) -> Value {
    let mut g = Value::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + eps;
        let hi = f(&probe);
        probe[idx] = orig - eps;
        let lo = f(&probe);
        probe[idx] = orig;
        g[idx] = (hi - lo) / (2.0 * eps);
    }
    g
}

/// Largest relative elementwise error between two gradients, with an absolute
/// floor so near-zero entries compare absolutely.
pub fn max_rel_error(a: &Value, b: &Value) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1.0);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
