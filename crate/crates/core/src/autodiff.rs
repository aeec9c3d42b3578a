//! Reverse-mode automatic differentiation over row-major 2-D tensors.
//!
//! A [`Graph`] is a tape. Building an operation checks shapes, computes the
//! forward value eagerly, and appends a record. [`Graph::backward`] walks the
//! records once in reverse order — the tape is already topologically sorted —
//! and accumulates gradients into every node that (transitively) depends on a
//! parameter. Because all shape validation happens at build time, backward
//! cannot fail on a graph that was constructed successfully.
//!
//! Conventions:
//! - every tensor is 2-D; a vector is `1 x d` and a scalar is `1 x 1`;
//! - storage is row-major;
//! - masks mark *valid* entries with `true`; invalid positions produce exact
//!   zeros in the forward value and receive no gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// Row/column extents of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn of(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node in one [`Graph`]. Ids are not portable across graphs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Node<S> {
    shape: Shape,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// One recorded operation: the inputs it read and the state backward needs.
enum Op<S> {
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Recip { a: usize },
    Scale { a: usize, c: S },
    AddConst { a: usize },
    ScaleBy { a: usize, s: usize },
    BroadcastAddRow { a: usize, row: usize },
    ScaleRows { a: usize, s: usize },
    Softmax { a: usize, valid: Option<Vec<bool>> },
    SumAll { a: usize },
    MeanRows { a: usize },
    MaxRows { a: usize, argmax: Vec<usize> },
    MaskedMeanRows { a: usize, keep: Vec<bool>, count: usize },
    Cosine { a: usize, b: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Vec<S>, inv_std: Vec<S> },
    Dropout { a: usize, keep: Vec<bool>, inv_keep: S },
}

struct Record<S> {
    out: usize,
    op: Op<S>,
}

/// Computation tape. Create one per forward pass, build the loss, call
/// [`Graph::backward`], read gradients, and drop it.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    records: Vec<Record<S>>,
    training: bool,
    dropout_rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Graph<S> {
    /// Inference-mode graph: dropout layers are identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
            training: false,
            dropout_rate: 0.0,
            rng: None,
        }
    }

    /// Training-mode graph: dropout layers sample a fresh keep mask from a
    /// deterministic stream seeded here.
    pub fn train(dropout_rate: f64, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
            training: true,
            dropout_rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    // ---- node introspection ------------------------------------------------

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Value of a `1 x 1` node.
    pub fn value(&self, id: NodeId) -> S {
        debug_assert!(self.nodes[id.0].shape.is_scalar());
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if any
    /// reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- leaves ------------------------------------------------------------

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, shape: Shape, data: Vec<S>) -> NodeId {
        assert_eq!(shape.len(), data.len(), "constant: data length != shape");
        self.push_leaf(shape, data, false)
    }

    /// Leaf that accumulates a gradient (a trainable parameter binding).
    pub fn param(&mut self, shape: Shape, data: Vec<S>) -> NodeId {
        assert_eq!(shape.len(), data.len(), "param: data length != shape");
        self.push_leaf(shape, data, true)
    }

    /// `1 x 1` constant.
    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(Shape::of(1, 1), vec![v])
    }

    fn push_leaf(&mut self, shape: Shape, data: Vec<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { shape, data, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Shape, data: Vec<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        self.nodes.push(Node { shape, data, requires_grad, grad: None });
        let out = self.nodes.len() - 1;
        self.records.push(Record { out, op });
        NodeId(out)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- operations --------------------------------------------------------

    /// `a (n x k) * b (k x m) -> n x m`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.pair(), rhs: sb.pair() });
        }
        let (n, k, m) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![S::zero(); n * m];
        {
            let da = self.data(a);
            let db = self.data(b);
            for i in 0..n {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == S::zero() {
                        continue;
                    }
                    for j in 0..m {
                        out[i * m + j] = out[i * m + j] + av * db[p * m + j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_op(Shape::of(n, m), out, rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let mut out = vec![S::zero(); s.len()];
        {
            let d = self.data(a);
            for i in 0..s.rows {
                for j in 0..s.cols {
                    out[j * s.rows + i] = d[i * s.cols + j];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(Shape::of(s.cols, s.rows), out, rg, Op::Transpose { a: a.0 }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product (Hadamard).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: impl Fn(usize, usize) -> Op<S>,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: name, lhs: sa.pair(), rhs: sb.pair() });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_op(sa, out, rg, op(a.0, b.0)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .map(|&x| S::one() / (S::one() + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Sigmoid { a: a.0 }))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Relu { a: a.0 }))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let out: Vec<S> = self.data(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Exp { a: a.0 }))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= S::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} is not strictly positive"),
            });
        }
        let out: Vec<S> = self.data(a).iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Log { a: a.0 }))
    }

    /// Square root; inputs must be non-negative. The derivative at exactly
    /// zero is taken as zero so standardizing a constant batch stays finite.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if let Some(&bad) = self.data(a).iter().find(|&&x| x < S::zero()) {
            return Err(Error::Domain { op: "sqrt", detail: format!("input {bad} is negative") });
        }
        let out: Vec<S> = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Sqrt { a: a.0 }))
    }

    /// Elementwise reciprocal; zero inputs are rejected.
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if self.data(a).iter().any(|&x| x == S::zero()) {
            return Err(Error::Domain { op: "recip", detail: "input contains zero".into() });
        }
        let out: Vec<S> = self.data(a).iter().map(|&x| S::one() / x).collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Recip { a: a.0 }))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let s = self.shape(a);
        let out: Vec<S> = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Scale { a: a.0, c }))
    }

    pub fn add_const(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let s = self.shape(a);
        let out: Vec<S> = self.data(a).iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::AddConst { a: a.0 }))
    }

    /// Multiply every entry of `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.shape(s);
        if !ss.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a).pair(),
                rhs: ss.pair(),
            });
        }
        let sv = self.value(s);
        let sa = self.shape(a);
        let out: Vec<S> = self.data(a).iter().map(|&x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push_op(sa, out, rg, Op::ScaleBy { a: a.0, s: s.0 }))
    }

    /// Add a `1 x d` row vector to every row of an `n x d` matrix.
    pub fn broadcast_add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.rows != 1 || sr.cols != sa.cols {
            return Err(Error::ShapeMismatch { op: "broadcast_add_row", lhs: sa.pair(), rhs: sr.pair() });
        }
        let mut out = self.data(a).to_vec();
        {
            let r = self.data(row);
            for i in 0..sa.rows {
                for j in 0..sa.cols {
                    out[i * sa.cols + j] = out[i * sa.cols + j] + r[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push_op(sa, out, rg, Op::BroadcastAddRow { a: a.0, row: row.0 }))
    }

    /// Multiply row `i` of an `n x d` matrix by entry `i` of an `n x 1`
    /// column, broadcasting each per-row factor across the columns.
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if ss.cols != 1 || ss.rows != sa.rows {
            return Err(Error::ShapeMismatch { op: "scale_rows", lhs: sa.pair(), rhs: ss.pair() });
        }
        let mut out = self.data(a).to_vec();
        {
            let f = self.data(s);
            for i in 0..sa.rows {
                for j in 0..sa.cols {
                    out[i * sa.cols + j] = out[i * sa.cols + j] * f[i];
                }
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push_op(sa, out, rg, Op::ScaleRows { a: a.0, s: s.0 }))
    }

    /// Row-wise softmax over all entries.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax restricted to entries whose mask is `true`. Invalid
    /// entries are exactly zero in the output and receive no gradient. Every
    /// row must keep at least one valid entry.
    pub fn softmax_rows_masked(&mut self, a: NodeId, valid: &[bool]) -> Result<NodeId> {
        let s = self.shape(a);
        if valid.len() != s.len() {
            return Err(Error::InvalidMask {
                op: "softmax",
                detail: format!("mask length {} != {} entries", valid.len(), s.len()),
            });
        }
        self.softmax_impl(a, Some(valid.to_vec()))
    }

    fn softmax_impl(&mut self, a: NodeId, valid: Option<Vec<bool>>) -> Result<NodeId> {
        let s = self.shape(a);
        let mut out = vec![S::zero(); s.len()];
        {
            let d = self.data(a);
            for i in 0..s.rows {
                let row = &d[i * s.cols..(i + 1) * s.cols];
                let live = |j: usize| valid.as_ref().map_or(true, |m| m[i * s.cols + j]);
                let mut max: Option<S> = None;
                for j in 0..s.cols {
                    if live(j) {
                        max = Some(match max {
                            Some(m) if m >= row[j] => m,
                            _ => row[j],
                        });
                    }
                }
                let max = max.ok_or_else(|| Error::InvalidMask {
                    op: "softmax",
                    detail: format!("row {i} has no valid entries"),
                })?;
                let mut z = S::zero();
                for j in 0..s.cols {
                    if live(j) {
                        let e = (row[j] - max).exp();
                        out[i * s.cols + j] = e;
                        z = z + e;
                    }
                }
                for j in 0..s.cols {
                    if live(j) {
                        out[i * s.cols + j] = out[i * s.cols + j] / z;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Softmax { a: a.0, valid }))
    }

    /// Sum of every entry, as a `1 x 1` node.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.data(a).iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        Ok(self.push_op(Shape::of(1, 1), vec![total], rg, Op::SumAll { a: a.0 }))
    }

    /// Mean of every entry, as a `1 x 1` node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.shape(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, S::of(1.0 / n as f64))
    }

    /// Column-wise mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let inv = S::of(1.0 / s.rows as f64);
        let mut out = vec![S::zero(); s.cols];
        {
            let d = self.data(a);
            for i in 0..s.rows {
                for j in 0..s.cols {
                    out[j] = out[j] + d[i * s.cols + j];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let rg = self.rg(a);
        Ok(self.push_op(Shape::of(1, s.cols), out, rg, Op::MeanRows { a: a.0 }))
    }

    /// Column-wise max over rows: `n x d -> 1 x d`. Ties resolve to the
    /// smallest row index, so the subgradient choice is deterministic.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let mut out = vec![S::zero(); s.cols];
        let mut argmax = vec![0usize; s.cols];
        {
            let d = self.data(a);
            for j in 0..s.cols {
                let mut best = d[j];
                let mut best_i = 0usize;
                for i in 1..s.rows {
                    let v = d[i * s.cols + j];
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[j] = best;
                argmax[j] = best_i;
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(Shape::of(1, s.cols), out, rg, Op::MaxRows { a: a.0, argmax }))
    }

    /// Mean over the rows whose mask entry is `true`: `n x d -> 1 x d`.
    /// Excluded rows contribute nothing to the value or the gradient.
    pub fn masked_mean_rows(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let s = self.shape(a);
        if keep.len() != s.rows {
            return Err(Error::InvalidMask {
                op: "masked_mean_rows",
                detail: format!("mask length {} != {} rows", keep.len(), s.rows),
            });
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::InvalidMask {
                op: "masked_mean_rows",
                detail: "mask keeps no rows".into(),
            });
        }
        let inv = S::of(1.0 / count as f64);
        let mut out = vec![S::zero(); s.cols];
        {
            let d = self.data(a);
            for i in 0..s.rows {
                if keep[i] {
                    for j in 0..s.cols {
                        out[j] = out[j] + d[i * s.cols + j];
                    }
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let rg = self.rg(a);
        Ok(self.push_op(
            Shape::of(1, s.cols),
            out,
            rg,
            Op::MaskedMeanRows { a: a.0, keep: keep.to_vec(), count },
        ))
    }

    /// Cosine similarity of two `1 x d` vectors, as a `1 x 1` node. Either
    /// vector with a norm at or below `1e-12` is rejected as degenerate.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.rows != 1 {
            return Err(Error::ShapeMismatch { op: "cosine", lhs: sa.pair(), rhs: sb.pair() });
        }
        let (da, db) = (self.data(a), self.data(b));
        let dot = da.iter().zip(db).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        let na = da.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
        let nb = db.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
        let floor = S::of(1e-12);
        if na <= floor {
            return Err(Error::DegenerateVector { op: "cosine", norm: na.f64() });
        }
        if nb <= floor {
            return Err(Error::DegenerateVector { op: "cosine", norm: nb.f64() });
        }
        let c = dot / (na * nb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_op(Shape::of(1, 1), vec![c], rg, Op::Cosine { a: a.0, b: b.0 }))
    }

    /// Stack parts vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts"));
        }
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: sp.pair(),
                });
            }
            rows += sp.rows;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push_op(Shape::of(rows, cols), out, rg, Op::ConcatRows { parts: ids }))
    }

    /// Stack parts horizontally; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: sp.pair(),
                });
            }
            cols += sp.cols;
        }
        let mut out = vec![S::zero(); rows * cols];
        let mut at = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            let d = self.data(p);
            for i in 0..rows {
                for j in 0..sp.cols {
                    out[i * cols + at + j] = d[i * sp.cols + j];
                }
            }
            at += sp.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push_op(Shape::of(rows, cols), out, rg, Op::ConcatCols { parts: ids }))
    }

    /// Rows `start .. start + len`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.rows || len == 0 {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{} outside {} rows",
                start + len,
                s.rows
            )));
        }
        let out = self.data(a)[start * s.cols..(start + len) * s.cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push_op(Shape::of(len, s.cols), out, rg, Op::SliceRows { a: a.0, start }))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.cols || len == 0 {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{} outside {} cols",
                start + len,
                s.cols
            )));
        }
        let mut out = Vec::with_capacity(s.rows * len);
        {
            let d = self.data(a);
            for i in 0..s.rows {
                out.extend_from_slice(&d[i * s.cols + start..i * s.cols + start + len]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(Shape::of(s.rows, len), out, rg, Op::SliceCols { a: a.0, start }))
    }

    /// Per-row layer normalization with learned `1 x d` gain and bias:
    /// each row is centered, divided by `sqrt(var + 1e-5)` (population
    /// variance), then scaled by `gamma` and shifted by `beta`.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let sp = self.shape(id);
            if sp.rows != 1 || sp.cols != s.cols {
                let _ = name;
                return Err(Error::ShapeMismatch { op: "layer_norm", lhs: s.pair(), rhs: sp.pair() });
            }
        }
        let eps = S::of(1e-5);
        let d = s.cols;
        let inv_d = S::of(1.0 / d as f64);
        let mut xhat = vec![S::zero(); s.len()];
        let mut inv_std = vec![S::zero(); s.rows];
        let mut out = vec![S::zero(); s.len()];
        {
            let x = self.data(a);
            let g = self.data(gamma);
            let b = self.data(beta);
            for i in 0..s.rows {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) * inv_d;
                let var = row
                    .iter()
                    .fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                    * inv_d;
                let is = S::one() / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[i * d + j] = xh;
                    out[i * d + j] = g[j] * xh + b[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_op(
            s,
            out,
            rg,
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
        ))
    }

    /// Inverted dropout at the graph's configured rate. In eval mode, or at
    /// rate zero, this is the identity and records nothing.
    pub fn dropout(&mut self, a: NodeId) -> Result<NodeId> {
        if !self.training || self.dropout_rate <= 0.0 {
            return Ok(a);
        }
        if self.dropout_rate >= 1.0 {
            return Err(Error::contract(format!(
                "dropout rate {} must be below 1",
                self.dropout_rate
            )));
        }
        let keep_prob = 1.0 - self.dropout_rate;
        let s = self.shape(a);
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let keep: Vec<bool> = (0..s.len()).map(|_| rng.gen::<f64>() < keep_prob).collect();
        let inv_keep = S::of(1.0 / keep_prob);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * inv_keep } else { S::zero() })
            .collect();
        let rg = self.rg(a);
        Ok(self.push_op(s, out, rg, Op::Dropout { a: a.0, keep, inv_keep }))
    }

    // ---- backward ----------------------------------------------------------

    fn add_grad(&mut self, id: usize, contrib: &[S]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].shape.len();
        debug_assert_eq!(len, contrib.len());
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![S::zero(); len]);
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    /// Accumulate `d loss / d node` into every parameter-dependent node.
    /// `loss` must be `1 x 1`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be 1x1, got {}x{}",
                self.shape(loss).rows,
                self.shape(loss).cols
            )));
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for r in (0..self.records.len()).rev() {
            let out = self.records[r].out;
            let g = match &self.nodes[out].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Read-only pass over inputs; contributions are buffered, then
            // accumulated, to keep the borrows simple.
            let mut pending: Vec<(usize, Vec<S>)> = Vec::new();
            match &self.records[r].op {
                &Op::MatMul { a, b } => {
                    let sa = self.nodes[a].shape;
                    let sb = self.nodes[b].shape;
                    let (n, k, m) = (sa.rows, sa.cols, sb.cols);
                    if self.nodes[a].requires_grad {
                        let db = &self.nodes[b].data;
                        let mut da = vec![S::zero(); n * k];
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                if gv == S::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] = da[i * k + p] + gv * db[p * m + j];
                                }
                            }
                        }
                        pending.push((a, da));
                    }
                    if self.nodes[b].requires_grad {
                        let da = &self.nodes[a].data;
                        let mut db = vec![S::zero(); k * m];
                        for i in 0..n {
                            for p in 0..k {
                                let av = da[i * k + p];
                                if av == S::zero() {
                                    continue;
                                }
                                for j in 0..m {
                                    db[p * m + j] = db[p * m + j] + av * g[i * m + j];
                                }
                            }
                        }
                        pending.push((b, db));
                    }
                }
                &Op::Transpose { a } => {
                    let sa = self.nodes[a].shape;
                    let mut da = vec![S::zero(); sa.len()];
                    for i in 0..sa.rows {
                        for j in 0..sa.cols {
                            da[i * sa.cols + j] = g[j * sa.rows + i];
                        }
                    }
                    pending.push((a, da));
                }
                &Op::Add { a, b } => {
                    pending.push((a, g.clone()));
                    pending.push((b, g.clone()));
                }
                &Op::Sub { a, b } => {
                    pending.push((a, g.clone()));
                    pending.push((b, g.iter().map(|&v| -v).collect()));
                }
                &Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let db = &self.nodes[b].data;
                        pending.push((a, g.iter().zip(db).map(|(&gv, &y)| gv * y).collect()));
                    }
                    if self.nodes[b].requires_grad {
                        let da = &self.nodes[a].data;
                        pending.push((b, g.iter().zip(da).map(|(&gv, &x)| gv * x).collect()));
                    }
                }
                &Op::Sigmoid { a } => {
                    let y = &self.nodes[out].data;
                    pending.push((
                        a,
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                            .collect(),
                    ));
                }
                &Op::Relu { a } => {
                    let x = &self.nodes[a].data;
                    pending.push((
                        a,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                            .collect(),
                    ));
                }
                &Op::Exp { a } => {
                    let y = &self.nodes[out].data;
                    pending.push((a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()));
                }
                &Op::Log { a } => {
                    let x = &self.nodes[a].data;
                    pending.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect()));
                }
                &Op::Sqrt { a } => {
                    let y = &self.nodes[out].data;
                    let half = S::of(0.5);
                    pending.push((
                        a,
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &yv)| {
                                if yv == S::zero() {
                                    S::zero()
                                } else {
                                    gv * half / yv
                                }
                            })
                            .collect(),
                    ));
                }
                &Op::Recip { a } => {
                    let y = &self.nodes[out].data;
                    pending.push((a, g.iter().zip(y).map(|(&gv, &yv)| -gv * yv * yv).collect()));
                }
                &Op::Scale { a, c } => {
                    pending.push((a, g.iter().map(|&gv| gv * c).collect()));
                }
                &Op::AddConst { a } => {
                    pending.push((a, g.clone()));
                }
                &Op::ScaleBy { a, s } => {
                    let sv = self.nodes[s].data[0];
                    if self.nodes[a].requires_grad {
                        pending.push((a, g.iter().map(|&gv| gv * sv).collect()));
                    }
                    if self.nodes[s].requires_grad {
                        let da = &self.nodes[a].data;
                        let ds = g
                            .iter()
                            .zip(da)
                            .fold(S::zero(), |acc, (&gv, &x)| acc + gv * x);
                        pending.push((s, vec![ds]));
                    }
                }
                &Op::BroadcastAddRow { a, row } => {
                    let sa = self.nodes[a].shape;
                    if self.nodes[a].requires_grad {
                        pending.push((a, g.clone()));
                    }
                    if self.nodes[row].requires_grad {
                        let mut dr = vec![S::zero(); sa.cols];
                        for i in 0..sa.rows {
                            for j in 0..sa.cols {
                                dr[j] = dr[j] + g[i * sa.cols + j];
                            }
                        }
                        pending.push((row, dr));
                    }
                }
                &Op::ScaleRows { a, s } => {
                    let sa = self.nodes[a].shape;
                    if self.nodes[a].requires_grad {
                        let f = &self.nodes[s].data;
                        let mut da = vec![S::zero(); sa.len()];
                        for i in 0..sa.rows {
                            for j in 0..sa.cols {
                                da[i * sa.cols + j] = g[i * sa.cols + j] * f[i];
                            }
                        }
                        pending.push((a, da));
                    }
                    if self.nodes[s].requires_grad {
                        let x = &self.nodes[a].data;
                        let mut ds = vec![S::zero(); sa.rows];
                        for i in 0..sa.rows {
                            for j in 0..sa.cols {
                                ds[i] = ds[i] + g[i * sa.cols + j] * x[i * sa.cols + j];
                            }
                        }
                        pending.push((s, ds));
                    }
                }
                Op::Softmax { a, valid } => {
                    let a = *a;
                    let s = self.nodes[out].shape;
                    let y = &self.nodes[out].data;
                    let mut da = vec![S::zero(); s.len()];
                    for i in 0..s.rows {
                        let live = |j: usize| valid.as_ref().map_or(true, |m| m[i * s.cols + j]);
                        let mut dot = S::zero();
                        for j in 0..s.cols {
                            if live(j) {
                                dot = dot + g[i * s.cols + j] * y[i * s.cols + j];
                            }
                        }
                        for j in 0..s.cols {
                            if live(j) {
                                da[i * s.cols + j] =
                                    y[i * s.cols + j] * (g[i * s.cols + j] - dot);
                            }
                        }
                    }
                    pending.push((a, da));
                }
                &Op::SumAll { a } => {
                    let sa = self.nodes[a].shape;
                    pending.push((a, vec![g[0]; sa.len()]));
                }
                &Op::MeanRows { a } => {
                    let sa = self.nodes[a].shape;
                    let inv = S::of(1.0 / sa.rows as f64);
                    let mut da = vec![S::zero(); sa.len()];
                    for i in 0..sa.rows {
                        for j in 0..sa.cols {
                            da[i * sa.cols + j] = g[j] * inv;
                        }
                    }
                    pending.push((a, da));
                }
                Op::MaxRows { a, argmax } => {
                    let a = *a;
                    let sa = self.nodes[a].shape;
                    let mut da = vec![S::zero(); sa.len()];
                    for (j, &i) in argmax.iter().enumerate() {
                        da[i * sa.cols + j] = g[j];
                    }
                    pending.push((a, da));
                }
                Op::MaskedMeanRows { a, keep, count } => {
                    let a = *a;
                    let sa = self.nodes[a].shape;
                    let inv = S::of(1.0 / *count as f64);
                    let mut da = vec![S::zero(); sa.len()];
                    for i in 0..sa.rows {
                        if keep[i] {
                            for j in 0..sa.cols {
                                da[i * sa.cols + j] = g[j] * inv;
                            }
                        }
                    }
                    pending.push((a, da));
                }
                &Op::Cosine { a, b } => {
                    let da = &self.nodes[a].data;
                    let db = &self.nodes[b].data;
                    let dot = da.iter().zip(db).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
                    let na = da.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
                    let nb = db.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
                    let c = dot / (na * nb);
                    let gv = g[0];
                    if self.nodes[a].requires_grad {
                        let ga: Vec<S> = da
                            .iter()
                            .zip(db)
                            .map(|(&x, &y)| gv * (y / (na * nb) - c * x / (na * na)))
                            .collect();
                        pending.push((a, ga));
                    }
                    if self.nodes[b].requires_grad {
                        let gb: Vec<S> = da
                            .iter()
                            .zip(db)
                            .map(|(&x, &y)| gv * (x / (na * nb) - c * y / (nb * nb)))
                            .collect();
                        pending.push((b, gb));
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let cols = self.nodes[out].shape.cols;
                    let mut at = 0usize;
                    for p in parts {
                        let rows = self.nodes[p].shape.rows;
                        let chunk = g[at * cols..(at + rows) * cols].to_vec();
                        pending.push((p, chunk));
                        at += rows;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let so = self.nodes[out].shape;
                    let mut at = 0usize;
                    for p in parts {
                        let pc = self.nodes[p].shape.cols;
                        let mut chunk = vec![S::zero(); so.rows * pc];
                        for i in 0..so.rows {
                            for j in 0..pc {
                                chunk[i * pc + j] = g[i * so.cols + at + j];
                            }
                        }
                        pending.push((p, chunk));
                        at += pc;
                    }
                }
                &Op::SliceRows { a, start } => {
                    let sa = self.nodes[a].shape;
                    let so = self.nodes[out].shape;
                    let mut da = vec![S::zero(); sa.len()];
                    da[start * sa.cols..(start + so.rows) * sa.cols].copy_from_slice(&g);
                    pending.push((a, da));
                }
                &Op::SliceCols { a, start } => {
                    let sa = self.nodes[a].shape;
                    let so = self.nodes[out].shape;
                    let mut da = vec![S::zero(); sa.len()];
                    for i in 0..so.rows {
                        for j in 0..so.cols {
                            da[i * sa.cols + start + j] = g[i * so.cols + j];
                        }
                    }
                    pending.push((a, da));
                }
                Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                    let (a, gamma, beta) = (*a, *gamma, *beta);
                    let s = self.nodes[a].shape;
                    let d = s.cols;
                    let inv_d = S::of(1.0 / d as f64);
                    let gm = &self.nodes[gamma].data;
                    if self.nodes[gamma].requires_grad {
                        let mut dg = vec![S::zero(); d];
                        for i in 0..s.rows {
                            for j in 0..d {
                                dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                            }
                        }
                        pending.push((gamma, dg));
                    }
                    if self.nodes[beta].requires_grad {
                        let mut db = vec![S::zero(); d];
                        for i in 0..s.rows {
                            for j in 0..d {
                                db[j] = db[j] + g[i * d + j];
                            }
                        }
                        pending.push((beta, db));
                    }
                    if self.nodes[a].requires_grad {
                        let mut da = vec![S::zero(); s.len()];
                        for i in 0..s.rows {
                            let mut sum_dxh = S::zero();
                            let mut sum_dxh_xh = S::zero();
                            for j in 0..d {
                                let dxh = g[i * d + j] * gm[j];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xhat[i * d + j];
                            }
                            for j in 0..d {
                                let dxh = g[i * d + j] * gm[j];
                                da[i * d + j] = inv_std[i]
                                    * (dxh - inv_d * sum_dxh - inv_d * xhat[i * d + j] * sum_dxh_xh);
                            }
                        }
                        pending.push((a, da));
                    }
                }
                Op::Dropout { a, keep, inv_keep } => {
                    let a = *a;
                    let ik = *inv_keep;
                    pending.push((
                        a,
                        g.iter()
                            .zip(keep)
                            .map(|(&gv, &k)| if k { gv * ik } else { S::zero() })
                            .collect(),
                    ));
                }
            }
            for (id, contrib) in pending {
                self.add_grad(id, &contrib);
            }
        }
        Ok(())
    }
}
