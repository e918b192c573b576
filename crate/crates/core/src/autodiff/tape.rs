//! Reverse-mode differentiation on a Wengert list.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks the list once in reverse, accumulating gradients additively into each
//! node. Values and gradients are dense [`Tensor`]s. The tape is rebuilt per
//! sample, so graph shapes may change freely between runs.

use std::rc::Rc;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Segment membership for [`Tape::segment_sum`]: output row `s` sums input
/// rows `perm[offsets[s]..offsets[s+1]]`.
///
/// Within a segment, addends are re-sorted by value (IEEE total order) before
/// accumulation, which makes the sum independent of both edge insertion order
/// and node labelling.
#[derive(Clone, Debug)]
pub struct SegmentSpec {
    pub perm: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl SegmentSpec {
    /// Build from a per-row segment id (spec rows need not be sorted).
    pub fn from_ids(segment_ids: &[usize], num_segments: usize) -> Self {
        let mut perm: Vec<usize> = (0..segment_ids.len()).collect();
        perm.sort_by_key(|&i| (segment_ids[i], i));
        let mut offsets = Vec::with_capacity(num_segments + 1);
        offsets.push(0);
        let mut k = 0;
        for s in 0..num_segments {
            while k < perm.len() && segment_ids[perm[k]] == s {
                k += 1;
            }
            offsets.push(k);
        }
        assert_eq!(
            k,
            perm.len(),
            "segment id out of range (num_segments = {num_segments})"
        );
        SegmentSpec { perm, offsets }
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Selu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Softplus,
    /// `ln(max(x, floor))`; gradient is zero below the floor.
    LnFloor(f64),
    Clamp(f64, f64),
}

const SELU_LAMBDA: f64 = 1.0507009873554805;
const SELU_ALPHA: f64 = 1.6732632423543772;

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Selu => {
            if x >= 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
            }
        }
        Unary::LeakyRelu => {
            if x >= 0.0 {
                x
            } else {
                0.01 * x
            }
        }
        Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Unary::Tanh => x.tanh(),
        // max(x,0) + ln1p(e^{-|x|}) is the overflow-safe form.
        Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        Unary::LnFloor(floor) => x.max(floor).ln(),
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

fn unary_backward(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        // Subgradient at 0 takes the positive branch.
        Unary::Selu => {
            if x >= 0.0 {
                SELU_LAMBDA
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp()
            }
        }
        Unary::LeakyRelu => {
            if x >= 0.0 {
                1.0
            } else {
                0.01
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
        Unary::LnFloor(floor) => {
            if x >= floor {
                1.0 / x
            } else {
                0.0
            }
        }
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// `(n×c) + (1×c)` row broadcast.
    AddRow(ValueId, ValueId),
    /// `(n×c) ⊙ (n×1)` column broadcast.
    MulCol(ValueId, ValueId),
    Scale(ValueId, f64),
    ConcatCols(Vec<ValueId>),
    ConcatRows(Vec<ValueId>),
    SliceCols(ValueId, usize, usize),
    Unary(ValueId, Unary),
    SegmentSum(ValueId, Rc<SegmentSpec>),
    GatherRows(ValueId, Rc<Vec<usize>>),
    MeanAll(ValueId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Computation tape: forward values plus enough structure to replay the
/// chain rule in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Record an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(Op::Mul(a, b), value)
    }

    /// Add a `1 × c` bias row to every row of `a`.
    pub fn add_row(&mut self, a: ValueId, bias: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(tb.rows(), 1, "bias must be a single row");
        assert_eq!(ta.cols(), tb.cols(), "add_row width mismatch");
        let mut value = ta.clone();
        let b_row = tb.row(0).to_vec();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (v, b) in row.iter_mut().zip(&b_row) {
                *v += b;
            }
        }
        self.push(Op::AddRow(a, bias), value)
    }

    /// Multiply each row of `a: n×c` by the matching entry of `s: n×1`.
    pub fn mul_col(&mut self, a: ValueId, s: ValueId) -> ValueId {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.cols(), 1, "scale must be a single column");
        assert_eq!(ta.rows(), ts.rows(), "mul_col row mismatch");
        let mut value = ta.clone();
        for r in 0..value.rows() {
            let k = ts.get(r, 0);
            for v in value.row_mut(r) {
                *v *= k;
            }
        }
        self.push(Op::MulCol(a, s), value)
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let value = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), value)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let w = t.cols();
            for r in 0..rows {
                value.row_mut(r)[at..at + w].copy_from_slice(t.row(r));
            }
            at += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(total, cols, data);
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn slice_cols(&mut self, a: ValueId, from: usize, to: usize) -> ValueId {
        let t = self.value(a);
        assert!(from < to && to <= t.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(t.rows(), to - from);
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[from..to]);
        }
        self.push(Op::SliceCols(a, from, to), value)
    }

    fn unary(&mut self, a: ValueId, kind: Unary) -> ValueId {
        let value = self.value(a).map(|x| unary_forward(kind, x));
        self.push(Op::Unary(a, kind), value)
    }

    pub fn selu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Unary::Selu)
    }

    pub fn leaky_relu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Unary::LeakyRelu)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        self.unary(a, Unary::Softplus)
    }

    /// `ln(max(x, floor))`, used when taking logs of clamped probabilities.
    pub fn ln_floor(&mut self, a: ValueId, floor: f64) -> ValueId {
        self.unary(a, Unary::LnFloor(floor))
    }

    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> ValueId {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    /// Sum rows into segments (see [`SegmentSpec`]). Empty segments yield
    /// zero rows.
    pub fn segment_sum(&mut self, a: ValueId, spec: Rc<SegmentSpec>) -> ValueId {
        let t = self.value(a);
        assert_eq!(spec.perm.len(), t.rows(), "segment spec covers all rows");
        let cols = t.cols();
        let mut value = Tensor::zeros(spec.num_segments(), cols);
        let mut addends: Vec<f64> = Vec::with_capacity(8);
        for s in 0..spec.num_segments() {
            let members = &spec.perm[spec.offsets[s]..spec.offsets[s + 1]];
            for c in 0..cols {
                addends.clear();
                addends.extend(members.iter().map(|&r| t.get(r, c)));
                addends.sort_unstable_by(|x, y| x.total_cmp(y));
                value.set(s, c, addends.iter().sum());
            }
        }
        self.push(Op::SegmentSum(a, spec), value)
    }

    /// Row gather: output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, a: ValueId, idx: Rc<Vec<usize>>) -> ValueId {
        let t = self.value(a);
        let mut value = Tensor::zeros(idx.len(), t.cols());
        for (r, &src) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(src));
        }
        self.push(Op::GatherRows(a, idx), value)
    }

    /// Mean of all entries, as a `1 × 1` tensor.
    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean of empty tensor");
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(m))
    }

    /// Reverse pass from a scalar output. Returns one gradient slot per node;
    /// ungradiented nodes are `None`.
    pub fn backward(&self, output: ValueId) -> Gradients {
        assert_eq!(
            self.nodes[output.0].value.shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let tb = self.value(*b);
                let ta = self.value(*a);
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                );
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::AddRow(a, bias) => {
                accum(grads, *a, g.clone());
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accum(grads, *bias, db);
            }
            Op::MulCol(a, s) => {
                let ts = self.value(*s);
                let ta = self.value(*a);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let k = ts.get(r, 0);
                    for v in da.row_mut(r) {
                        *v *= k;
                    }
                }
                let mut ds = Tensor::zeros(ta.rows(), 1);
                for r in 0..ta.rows() {
                    let dot: f64 = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                    ds.set(r, 0, dot);
                }
                accum(grads, *a, da);
                accum(grads, *s, ds);
            }
            Op::Scale(a, k) => {
                accum(grads, *a, g.map(|x| x * k));
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                    }
                    accum(grads, p, dp);
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut dp = Tensor::zeros(rows, g.cols());
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    accum(grads, p, dp);
                    at += rows;
                }
            }
            Op::SliceCols(a, from, to) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*from..*to].copy_from_slice(g.row(r));
                }
                accum(grads, *a, da);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * unary_backward(*kind, xv, yv))
                    .collect();
                accum(grads, *a, Tensor::from_vec(x.rows(), x.cols(), data));
            }
            Op::SegmentSum(a, spec) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for s in 0..spec.num_segments() {
                    let grow = g.row(s).to_vec();
                    for &r in &spec.perm[spec.offsets[s]..spec.offsets[s + 1]] {
                        for (acc, v) in da.row_mut(r).iter_mut().zip(&grow) {
                            *acc += v;
                        }
                    }
                }
                accum(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (acc, v) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accum(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let k = g.item() / t.len() as f64;
                accum(grads, *a, Tensor::filled(t.rows(), t.cols(), k));
            }
        }
    }
}

/// Gradient of a scalar tape output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, or `None` if the output does not depend on it.
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient w.r.t. a node, zeros if the output does not depend on it.
    pub fn get_or_zeros(&self, id: ValueId, shape: (usize, usize)) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}
