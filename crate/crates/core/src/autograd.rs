//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation as it is executed. Leaves are either
//! trainable (gradient tracked) or constant. [`Graph::backward`] walks the
//! tape in reverse once and returns the gradient of a `1 x 1` output with
//! respect to every tracked node.

use crate::tensor::{dot, Mat, Scalar};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise distance used by [`Graph::row_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distance {
    /// Squared error.
    L2,
    /// Huber / smooth L1 with threshold `beta`.
    SmoothL1 { beta: f64 },
}

impl Distance {
    pub fn value<T: Scalar>(self, d: T) -> T {
        match self {
            Distance::L2 => d * d,
            Distance::SmoothL1 { beta } => {
                let beta = T::lit(beta);
                let a = d.abs();
                if a < beta {
                    T::lit(0.5) * d * d / beta
                } else {
                    a - T::lit(0.5) * beta
                }
            }
        }
    }

    pub fn derivative<T: Scalar>(self, d: T) -> T {
        match self {
            Distance::L2 => T::lit(2.0) * d,
            Distance::SmoothL1 { beta } => {
                let beta = T::lit(beta);
                if d.abs() < beta {
                    d / beta
                } else if d > T::zero() {
                    T::one()
                } else {
                    -T::one()
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RepeatRow(Var),
    Scatter(Vec<(Var, Vec<usize>)>),
    MeanRows(Var),
    RowLoss { pred: Var, target: Mat<T>, rows: Vec<usize>, dist: Distance },
    CrossEntropy { logits: Var, label: usize },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    tracked: bool,
}

/// A recording of one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`]; untracked nodes have none.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulBt(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_row expects a single row");
        assert_eq!(bias.cols, self.value(a).cols, "add_row width");
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            for (o, &v) in value.row_mut(r).iter_mut().zip(&bias.data) {
                *o += v;
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::AddRow(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    /// Affine map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let tracked = self.tracked(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm beta shape");
        let n = T::lit(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let tracked = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), tracked)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols, "slice_cols out of range");
        let mut value = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let tracked = self.tracked(a);
        self.push(value, Op::SliceCols(a, start), tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + src.cols].copy_from_slice(src.row(r));
            }
            off += src.cols;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let tracked = self.tracked(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), tracked)
    }

    /// Broadcasts a `1 x n` row to `count x n`.
    pub fn repeat_row(&mut self, a: Var, count: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows, 1, "repeat_row expects a single row");
        let mut data = Vec::with_capacity(count * src.cols);
        for _ in 0..count {
            data.extend_from_slice(&src.data);
        }
        let value = Mat::from_vec(count, src.cols, data);
        let tracked = self.tracked(a);
        self.push(value, Op::RepeatRow(a), tracked)
    }

    /// Builds a `total`-row matrix where row `idx[i]` of the output is row
    /// `i` of the corresponding part. Every output row must be covered once.
    pub fn scatter_rows(&mut self, parts: &[(Var, &[usize])], total: usize) -> Var {
        let cols = self.value(parts[0].0).cols;
        let mut value = Mat::zeros(total, cols);
        let mut seen = vec![false; total];
        for (v, idx) in parts {
            let src = self.value(*v);
            assert_eq!(src.rows, idx.len(), "scatter_rows index count");
            assert_eq!(src.cols, cols, "scatter_rows width");
            for (i, &dst) in idx.iter().enumerate() {
                assert!(!seen[dst], "scatter_rows overlapping index {dst}");
                seen[dst] = true;
                value.row_mut(dst).copy_from_slice(src.row(i));
            }
        }
        assert!(seen.iter().all(|&s| s), "scatter_rows leaves rows uncovered");
        let tracked = parts.iter().any(|(v, _)| self.tracked(*v));
        let owned = parts.iter().map(|(v, idx)| (*v, idx.to_vec())).collect();
        self.push(value, Op::Scatter(owned), tracked)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let tracked = self.tracked(a);
        self.push(value, Op::MeanRows(a), tracked)
    }

    /// Mean of `dist(pred - target)` over the selected rows and all columns.
    pub fn row_loss(&mut self, pred: Var, target: &Mat<T>, rows: &[usize], dist: Distance) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "row_loss shape mismatch");
        assert!(!rows.is_empty(), "row_loss over an empty row set");
        let mut acc = T::zero();
        for &r in rows {
            for (&a, &b) in p.row(r).iter().zip(target.row(r)) {
                acc += dist.value(a - b);
            }
        }
        let denom = T::lit((rows.len() * p.cols) as f64);
        let value = Mat::from_vec(1, 1, vec![acc / denom]);
        let tracked = self.tracked(pred);
        self.push(
            value,
            Op::RowLoss { pred, target: target.clone(), rows: rows.to_vec(), dist },
            tracked,
        )
    }

    /// Softmax cross-entropy of a `1 x classes` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, 1, "cross_entropy expects a single row");
        assert!(label < l.cols, "label out of range");
        let max = l.data.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = l.data.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let value = Mat::from_vec(1, 1, vec![lse - l.data[label]]);
        let tracked = self.tracked(logits);
        self.push(value, Op::CrossEntropy { logits, label }, tracked)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(Mat::filled(1, 1, T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.tracked {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let mut acc = |v: Var, delta: Mat<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.matmul_bt(self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.tracked(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.tracked(*b) {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, &xv) in d.data.iter_mut().zip(&x.data) {
                    *o *= gelu_grad(xv);
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.tracked(*gamma) || self.tracked(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.at(r, c);
                            dg.data[c] += gv * xhat.at(r, c);
                            db.data[c] += gv;
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.tracked(*x) {
                    let n = T::lit(cols as f64);
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dxhat[c] = g.at(r, c) * gam.data[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dot(&dxhat, xhat.row(r)) / n;
                        for c in 0..cols {
                            dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat.at(r, c) * mean_dx));
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s = dot(g.row(r), y.row(r));
                    for c in 0..y.cols {
                        d.set(r, c, y.at(r, c) * (g.at(r, c) - s));
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.tracked(p) {
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, d);
                    }
                    off += cols;
                }
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut d = Mat::zeros(src.rows, src.cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::RepeatRow(a) => acc(*a, g.mean_rows().scale(T::lit(g.rows as f64))),
            Op::Scatter(parts) => {
                for (v, idx) in parts {
                    if self.tracked(*v) {
                        acc(*v, g.gather_rows(idx));
                    }
                }
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let inv = T::one() / T::lit(src.rows as f64);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..src.rows {
                    for (o, &v) in d.row_mut(r).iter_mut().zip(&g.data) {
                        *o = v * inv;
                    }
                }
                acc(*a, d);
            }
            Op::RowLoss { pred, target, rows, dist } => {
                let p = self.value(*pred);
                let scale = g.data[0] / T::lit((rows.len() * p.cols) as f64);
                let mut d = Mat::zeros(p.rows, p.cols);
                for &r in rows {
                    for c in 0..p.cols {
                        d.set(r, c, scale * dist.derivative(p.at(r, c) - target.at(r, c)));
                    }
                }
                acc(*pred, d);
            }
            Op::CrossEntropy { logits, label } => {
                let l = self.value(*logits);
                let max = l.data.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = l.data.iter().map(|&v| (v - max).exp()).collect();
                let sum: T = exps.iter().copied().sum();
                let mut d = Mat::zeros(1, l.cols);
                for c in 0..l.cols {
                    let p = exps[c] / sum;
                    let y = if c == *label { T::one() } else { T::zero() };
                    d.data[c] = g.data[0] * (p - y);
                }
                acc(*logits, d);
            }
        }
    }
}
