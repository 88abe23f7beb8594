//! Define-by-run computation tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the nodes in exact
//! reverse recording order. Nodes are never mutated after they are recorded.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol { x: Var, col: Var },
    Scale(Var, f64),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, segs: Vec<Range<usize>> },
    BroadcastSegments { x: Var, segs: Vec<Range<usize>> },
    GatherRows { x: Var, idx: Vec<usize> },
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    L2Normalize { x: Var, eps: f64 },
    LogSumExpRows { x: Var, exclude: Option<Vec<usize>> },
    Pick { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Minimum(Var, Var),
    WeightedCentroid { w: Var, p: Var, segs: Vec<Range<usize>>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) {
    if a.shape() != b.shape() {
        panic!("{}", TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf. Its gradient is reported under `name` by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf without a parameter name (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            panic!("matmul inner dims {:?} x {:?}", ta.shape(), tb.shape());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::normal(ta), MatRef::normal(tb), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::MatMul { a, b, trans_b: false }, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            panic!("matmul_nt inner dims {:?} x {:?}", ta.shape(), tb.shape());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::normal(ta), MatRef::transposed(tb), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::MatMul { a, b, trans_b: true }, rg)
    }

    /// Affine map `x · w + b` with `b` a `[1, out]` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        if tw.rows() != k || tb.numel() != n {
            panic!("linear dims {:?} {:?} {:?}", tx.shape(), tw.shape(), tb.shape());
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, MatRef::normal(tx), MatRef::normal(tw), 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same("add", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `[1, C]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        assert_eq!(tr.numel(), c, "add_row width");
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow { x, row }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_same("sub", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same("mul", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiplies each row of `x` by the matching entry of the `[R, 1]` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (tx, tc) = (self.value(x), self.value(col));
        assert_eq!(tc.numel(), tx.rows(), "mul_col height");
        let c = tx.cols();
        let mut out = tx.clone();
        for (chunk, s) in out.data_mut().chunks_mut(c).zip(tc.data()) {
            for o in chunk.iter_mut() {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(col);
        self.push(out, Op::MulCol { x, col }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start <= end && end <= c, "slice_cols {start}..{end} of {c}");
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + end]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![r, w], out).unwrap(), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                let t = self.value(*p);
                assert_eq!(t.rows(), r, "concat_cols rows");
                out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(vec![r, total], out).unwrap(), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Column-wise max over each row segment. Ties go to the lowest row index.
    pub fn segment_max(&mut self, x: Var, segs: &[Range<usize>]) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(segs.len() * c);
        let mut argmax = Vec::with_capacity(segs.len() * c);
        for seg in segs {
            assert!(!seg.is_empty(), "segment_max over empty segment");
            let first = tx.row_slice(seg.start);
            let mut best: Vec<f64> = first.to_vec();
            let mut arg: Vec<usize> = vec![seg.start; c];
            for r in seg.start + 1..seg.end {
                for (j, &v) in tx.row_slice(r).iter().enumerate() {
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = r;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![segs.len(), c], out).unwrap(), Op::SegmentMax { x, argmax }, rg)
    }

    /// Column-wise mean over each row segment.
    pub fn segment_mean(&mut self, x: Var, segs: &[Range<usize>]) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; segs.len() * c];
        for (f, seg) in segs.iter().enumerate() {
            assert!(!seg.is_empty(), "segment_mean over empty segment");
            let dst = &mut out[f * c..(f + 1) * c];
            for r in seg.clone() {
                for (d, v) in dst.iter_mut().zip(tx.row_slice(r)) {
                    *d += v;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![segs.len(), c], out).unwrap(), Op::SegmentMean { x, segs: segs.to_vec() }, rg)
    }

    /// Repeats row `f` of `x` over every row of segment `f`.
    pub fn broadcast_segments(&mut self, x: Var, segs: &[Range<usize>]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rows(), segs.len(), "broadcast_segments count");
        let c = tx.cols();
        let total = segs.iter().map(|s| s.end).max().unwrap_or(0);
        let mut out = vec![0.0; total * c];
        for (f, seg) in segs.iter().enumerate() {
            for r in seg.clone() {
                out[r * c..(r + 1) * c].copy_from_slice(tx.row_slice(f));
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![total, c], out).unwrap(), Op::BroadcastSegments { x, segs: segs.to_vec() }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(tx.row_slice(i));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![idx.len(), c], out).unwrap(), Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// Row `i` comes from `a` where `mask[i]`, else from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Var {
        check_same("select_rows", self.value(a), self.value(b));
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(mask.len(), ta.rows());
        let c = ta.cols();
        let mut out = tb.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[i * c..(i + 1) * c].copy_from_slice(ta.row_slice(i));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::SelectRows { mask: mask.to_vec(), a, b }, rg)
    }

    /// Row-wise `x / (‖x‖₂ + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            chunk.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, eps }, rg)
    }

    /// Row-wise `log Σ_j exp(x_ij)`, optionally skipping column `exclude[i]` in row `i`.
    pub fn logsumexp_rows(&mut self, x: Var, exclude: Option<&[usize]>) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let skip = exclude.map(|e| e[i]);
            let row = tx.row_slice(i);
            let mx = row.iter().enumerate().filter(|(j, _)| Some(*j) != skip).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().enumerate().filter(|(j, _)| Some(*j) != skip).map(|(_, &v)| (v - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        let _ = c;
        let rg = self.rg(x);
        self.push(Tensor::new(vec![r, 1], out).unwrap(), Op::LogSumExpRows { x, exclude: exclude.map(|e| e.to_vec()) }, rg)
    }

    /// Picks `x[i, idx[i]]` into an `[R, 1]` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(idx.len(), tx.rows());
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| tx.get(i, j)).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![idx.len(), 1], out).unwrap(), Op::Pick { x, idx: idx.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Row sums into an `[R, 1]` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let out: Vec<f64> = tx.data().chunks(c).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![out.len(), 1], out).unwrap(), Op::SumCols(x), rg)
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        check_same("minimum", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), f64::min);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Minimum(a, b), rg)
    }

    /// Per segment and per weight column `k`: `Σ w_ik p_i / (Σ w_ik + eps)`.
    ///
    /// `w` is `[R, K]`, `p` is `[R, 2]`; the result is `[F, 2K]` laid out as
    /// `(y_0, z_0, y_1, z_1, ...)`.
    pub fn weighted_centroid(&mut self, w: Var, p: Var, segs: &[Range<usize>], eps: f64) -> Var {
        let (tw, tp) = (self.value(w), self.value(p));
        assert_eq!(tp.cols(), 2, "weighted_centroid expects 2-d coordinates");
        assert_eq!(tw.rows(), tp.rows());
        let k = tw.cols();
        let mut out = vec![0.0; segs.len() * 2 * k];
        for (f, seg) in segs.iter().enumerate() {
            for m in 0..k {
                let (mut s, mut ny, mut nz) = (0.0, 0.0, 0.0);
                for r in seg.clone() {
                    let wi = tw.get(r, m);
                    s += wi;
                    ny += wi * tp.get(r, 0);
                    nz += wi * tp.get(r, 1);
                }
                out[f * 2 * k + 2 * m] = ny / (s + eps);
                out[f * 2 * k + 2 * m + 1] = nz / (s + eps);
            }
        }
        let rg = self.rg(w) || self.rg(p);
        self.push(Tensor::new(vec![segs.len(), 2 * k], out).unwrap(), Op::WeightedCentroid { w, p, segs: segs.to_vec(), eps }, rg)
    }

    /// Cosine similarity matrix between the rows of `a` and the rows of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Var {
        let na = self.l2_normalize_rows(a, 1e-12);
        let nb = self.l2_normalize_rows(b, 1e-12);
        self.matmul_nt(na, nb)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(TensorError::UnknownNode(loss.0))?;
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(go) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &go, &mut grads);
            }
            grads[id] = Some(go);
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every named parameter leaf; unreached parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let g = grads.grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn propagate(&self, node: &Node, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                if rg(a) {
                    let mut da = vec![0.0; m * k];
                    if trans_b {
                        gemm(m, n, k, MatRef::normal(go), MatRef::normal(tb), 0.0, &mut da);
                    } else {
                        gemm(m, n, k, MatRef::normal(go), MatRef::transposed(tb), 0.0, &mut da);
                    }
                    acc(a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if rg(b) {
                    let mut db = vec![0.0; k * n];
                    if trans_b {
                        gemm(n, m, k, MatRef::transposed(go), MatRef::normal(ta), 0.0, &mut db);
                    } else {
                        gemm(k, m, n, MatRef::transposed(ta), MatRef::normal(go), 0.0, &mut db);
                    }
                    acc(b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            &Op::Linear { x, w, b } => {
                let (tx, tw) = (val(x), val(w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
                if rg(x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::normal(go), MatRef::transposed(tw), 0.0, &mut dx);
                    acc(x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                }
                if rg(w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, MatRef::transposed(tx), MatRef::normal(go), 0.0, &mut dw);
                    acc(w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
                }
                if rg(b) {
                    acc(b, Tensor::new(val(b).shape().to_vec(), col_sums(go)).unwrap());
                }
            }
            &Op::Add(a, b) => {
                acc(a, go.clone());
                acc(b, go.clone());
            }
            &Op::AddRow { x, row } => {
                acc(x, go.clone());
                if rg(row) {
                    acc(row, Tensor::new(val(row).shape().to_vec(), col_sums(go)).unwrap());
                }
            }
            &Op::Sub(a, b) => {
                acc(a, go.clone());
                if rg(b) {
                    acc(b, go.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    acc(a, go.zip_map(val(b), |g, y| g * y));
                }
                if rg(b) {
                    acc(b, go.zip_map(val(a), |g, x| g * x));
                }
            }
            &Op::MulCol { x, col } => {
                let (tx, tc) = (val(x), val(col));
                let c = tx.cols();
                if rg(x) {
                    let mut dx = go.clone();
                    for (chunk, s) in dx.data_mut().chunks_mut(c).zip(tc.data()) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(x, dx);
                }
                if rg(col) {
                    let dc: Vec<f64> = go
                        .data()
                        .chunks(c)
                        .zip(tx.data().chunks(c))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(col, Tensor::new(tc.shape().to_vec(), dc).unwrap());
                }
            }
            &Op::Scale(x, s) => acc(x, go.map(|v| v * s)),
            &Op::Square(x) => acc(x, go.zip_map(val(x), |g, v| 2.0 * g * v)),
            &Op::Relu(x) => acc(x, go.zip_map(out, |g, o| if o > 0.0 { g } else { 0.0 })),
            &Op::Tanh(x) => acc(x, go.zip_map(out, |g, o| g * (1.0 - o * o))),
            &Op::Sigmoid(x) => acc(x, go.zip_map(out, |g, o| g * o * (1.0 - o))),
            &Op::SliceCols { x, start } => {
                let tx = val(x);
                let (r, c) = (tx.rows(), tx.cols());
                let w = out.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(go.row_slice(i));
                }
                acc(x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.cols();
                    if rg(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&go.data()[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, Tensor::new(tp.shape().to_vec(), dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SegmentMax { x, argmax } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (i, &r) in argmax.iter().enumerate() {
                    let j = i % c;
                    dx.data_mut()[r * c + j] += go.data()[i];
                }
                acc(*x, dx);
            }
            Op::SegmentMean { x, segs } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (f, seg) in segs.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    let g = go.row_slice(f);
                    for r in seg.clone() {
                        for (d, gv) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::BroadcastSegments { x, segs } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (f, seg) in segs.iter().enumerate() {
                    let dst = &mut dx.data_mut()[f * c..(f + 1) * c];
                    for r in seg.clone() {
                        for (d, gv) in dst.iter_mut().zip(go.row_slice(r)) {
                            *d += gv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, idx } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (i, &r) in idx.iter().enumerate() {
                    for (d, gv) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(go.row_slice(i)) {
                        *d += gv;
                    }
                }
                acc(*x, dx);
            }
            Op::SelectRows { mask, a, b } => {
                let c = out.cols();
                let mut da = go.clone();
                let mut db = go.clone();
                for (i, &m) in mask.iter().enumerate() {
                    let zero = if m { &mut db } else { &mut da };
                    zero.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                acc(*a, da);
                acc(*b, db);
            }
            &Op::L2Normalize { x, eps } => {
                let tx = val(x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for ((d, xr), g) in dx.data_mut().chunks_mut(c).zip(tx.data().chunks(c)).zip(go.data().chunks(c)) {
                    let s = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let n = s + eps;
                    if s == 0.0 {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d = g / n);
                        continue;
                    }
                    let dot: f64 = xr.iter().zip(g).map(|(a, b)| a * b).sum();
                    let k = dot / (s * n * n);
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xr) {
                        *dv = gv / n - xv * k;
                    }
                }
                acc(x, dx);
            }
            Op::LogSumExpRows { x, exclude } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for i in 0..tx.rows() {
                    let skip = exclude.as_ref().map(|e| e[i]);
                    let lse = out.data()[i];
                    let g = go.data()[i];
                    for j in 0..c {
                        if Some(j) != skip {
                            dx.data_mut()[i * c + j] = g * (tx.get(i, j) - lse).exp();
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Pick { x, idx } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (i, &j) in idx.iter().enumerate() {
                    dx.data_mut()[i * c + j] += go.data()[i];
                }
                acc(*x, dx);
            }
            &Op::SumAll(x) => acc(x, Tensor::full(val(x).shape(), go.item())),
            &Op::MeanAll(x) => {
                let n = val(x).numel() as f64;
                acc(x, Tensor::full(val(x).shape(), go.item() / n));
            }
            &Op::SumCols(x) => {
                let tx = val(x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (chunk, g) in dx.data_mut().chunks_mut(c).zip(go.data()) {
                    chunk.iter_mut().for_each(|v| *v = *g);
                }
                acc(x, dx);
            }
            &Op::Minimum(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let mut da = go.clone();
                let mut db = go.clone();
                for i in 0..go.numel() {
                    if ta.data()[i] <= tb.data()[i] {
                        db.data_mut()[i] = 0.0;
                    } else {
                        da.data_mut()[i] = 0.0;
                    }
                }
                acc(a, da);
                acc(b, db);
            }
            Op::WeightedCentroid { w, p, segs, eps } => {
                let (tw, tp) = (val(*w), val(*p));
                let k = tw.cols();
                let mut dw = Tensor::zeros(tw.shape());
                let mut dp = Tensor::zeros(tp.shape());
                for (f, seg) in segs.iter().enumerate() {
                    for m in 0..k {
                        let s: f64 = seg.clone().map(|r| tw.get(r, m)).sum::<f64>() + eps;
                        let cy = out.get(f, 2 * m);
                        let cz = out.get(f, 2 * m + 1);
                        let gy = go.get(f, 2 * m);
                        let gz = go.get(f, 2 * m + 1);
                        for r in seg.clone() {
                            let (py, pz) = (tp.get(r, 0), tp.get(r, 1));
                            dw.data_mut()[r * k + m] += (gy * (py - cy) + gz * (pz - cz)) / s;
                            let wi = tw.get(r, m) / s;
                            dp.data_mut()[r * 2] += gy * wi;
                            dp.data_mut()[r * 2 + 1] += gz * wi;
                        }
                    }
                }
                acc(*w, dw);
                acc(*p, dp);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
