//! Reverse-mode automatic differentiation over dense rank-2 arrays.
//!
//! A [`Tape`] is an append-only sequence of operation records. Building an
//! op validates shapes immediately; values are computed by [`Tape::forward`]
//! and adjoints by [`Tape::backward`]. Every tensor is a row-major
//! `[rows, cols]` array; scalars are `[1, 1]`. There is no implicit
//! broadcasting: mixed-shape arithmetic goes through the explicit
//! `broadcast_rows` / `broadcast_cols` ops, and everything else requires
//! exact shape equality.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Axis};

/// Dense rank-2 array of scalars, row-major.
pub type Mat<S> = Array2<S>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Per-row weighted class targets for the fused softmax cross-entropy op.
///
/// Row `r` contributes `sum_j w_j * (-log softmax(logits[r])[cls_j])`.
/// A single `(target, mask)` entry per row recovers ordinary masked
/// cross-entropy; multiple entries with counts give a bag-of-words loss.
#[derive(Debug, Clone)]
pub struct ClassWeights<S> {
    pub rows: Vec<Vec<(usize, S)>>,
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// max(0, x); subgradient at the kink is 0.
    Hinge(NodeId),
    Clamp(NodeId, S, S),
    /// Column-wise concatenation of two arrays with equal row counts.
    Concat(NodeId, NodeId),
    /// Columns `[lo, hi)`.
    SliceCols(NodeId, usize, usize),
    /// Row lookup (embedding gather); backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// `[1, d]` tiled to `[n, d]`.
    BroadcastRows(NodeId, usize),
    /// `[n, 1]` tiled to `[n, m]`.
    BroadcastCols(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// `[n, d] -> [1, d]`.
    SumRows(NodeId),
    MeanRows(NodeId),
    /// `[n, d] -> [n, 1]`.
    SumCols(NodeId),
    MeanCols(NodeId),
    SoftmaxXent(NodeId, ClassWeights<S>),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise-mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Hinge(..) => "hinge-max-with-zero",
            Op::Clamp(..) => "clamp",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice-cols",
            Op::GatherRows(..) => "gather-rows",
            Op::BroadcastRows(..) => "broadcast-rows",
            Op::BroadcastCols(..) => "broadcast-cols",
            Op::SumAll(..) => "reduce-sum",
            Op::MeanAll(..) => "reduce-mean",
            Op::SumRows(..) => "reduce-sum-rows",
            Op::MeanRows(..) => "reduce-mean-rows",
            Op::SumCols(..) => "reduce-sum-cols",
            Op::MeanCols(..) => "reduce-mean-cols",
            Op::SoftmaxXent(..) => "softmax-cross-entropy",
        }
    }
}

struct Node<S: Scalar> {
    op: Op<S>,
    shape: (usize, usize),
    value: Option<Mat<S>>,
}

/// Append-only reverse-mode differentiation tape.
///
/// Single-owner: a tape is not shareable during forward/backward. Gradients
/// from independent tapes are merged by explicit summation (see
/// [`merge_grads`]).
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    fn push(&mut self, op: Op<S>, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node { op, shape, value: None });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Mat<S>, trainable: bool) -> Result<NodeId> {
        check_finite_mat(&value, self.nodes.len(), "leaf")?;
        let shape = (value.nrows(), value.ncols());
        self.nodes.push(Node { op: Op::Leaf { trainable }, shape, value: Some(value) });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Trainable leaf (a parameter). Gradients are reported for these.
    pub fn leaf(&mut self, value: Mat<S>) -> Result<NodeId> {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (input data, noise, masks).
    pub fn constant(&mut self, value: Mat<S>) -> Result<NodeId> {
        self.push_leaf(value, false)
    }

    /// Rebind a leaf to a new value of identical shape and invalidate all
    /// computed (non-leaf) values so the next `forward` recomputes them.
    pub fn rebind(&mut self, id: NodeId, value: Mat<S>) -> Result<()> {
        let node = &self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::Tape(format!("rebind target {} is not a leaf", id.0)));
        }
        if node.shape != (value.nrows(), value.ncols()) {
            return Err(Error::Shape {
                op: "rebind",
                detail: format!("expected {:?}, got ({}, {})", node.shape, value.nrows(), value.ncols()),
            });
        }
        check_finite_mat(&value, id.0, "leaf")?;
        self.nodes[id.0].value = Some(value);
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf { .. }) {
                node.value = None;
            }
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(self.shape_err("matmul", format!("({ar}, {ac}) x ({br}, {bc})")));
        }
        Ok(self.push(Op::MatMul(a, b), (ar, bc)))
    }

    fn binary_same_shape(&mut self, op: Op<S>, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(self.shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(op, sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add(a, b), "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub(a, b), "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul(a, b), "elementwise-mul", a, b)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Scale(x, c), shape)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: S) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::AddScalar(x, c), shape)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Tanh(x), shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Sigmoid(x), shape)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Exp(x), shape)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Log(x), shape)
    }

    /// max(0, x) elementwise. The subgradient at 0 is defined as 0.
    pub fn hinge(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Hinge(x), shape)
    }

    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Clamp(x, lo, hi), shape)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(self.shape_err("concat", format!("row counts {ar} vs {br}")));
        }
        Ok(self.push(Op::Concat(a, b), (ar, ac + bc)))
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if lo >= hi || hi > c {
            return Err(self.shape_err("slice-cols", format!("[{lo}, {hi}) of {c} columns")));
        }
        Ok(self.push(Op::SliceCols(x, lo, hi), (r, hi - lo)))
    }

    pub fn gather_rows(&mut self, x: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(self.shape_err("gather-rows", format!("row {bad} out of {r}")));
        }
        let n = ids.len();
        Ok(self.push(Op::GatherRows(x, ids), (n, c)))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(self.shape_err("broadcast-rows", format!("expected 1 row, got {r}")));
        }
        Ok(self.push(Op::BroadcastRows(x, n), (n, c)))
    }

    pub fn broadcast_cols(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if c != 1 {
            return Err(self.shape_err("broadcast-cols", format!("expected 1 column, got {c}")));
        }
        Ok(self.push(Op::BroadcastCols(x, m), (r, m)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x), (1, 1))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll(x), (1, 1))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let (_, c) = self.shape(x);
        self.push(Op::SumRows(x), (1, c))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (_, c) = self.shape(x);
        self.push(Op::MeanRows(x), (1, c))
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let (r, _) = self.shape(x);
        self.push(Op::SumCols(x), (r, 1))
    }

    pub fn mean_cols(&mut self, x: NodeId) -> NodeId {
        let (r, _) = self.shape(x);
        self.push(Op::MeanCols(x), (r, 1))
    }

    /// Fused, numerically stable weighted softmax cross-entropy producing a
    /// `[1, 1]` scalar.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: ClassWeights<S>) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if targets.rows.len() != r {
            return Err(self.shape_err(
                "softmax-cross-entropy",
                format!("{} target rows for {r} logit rows", targets.rows.len()),
            ));
        }
        for row in &targets.rows {
            if let Some(&(bad, _)) = row.iter().find(|&&(cls, _)| cls >= c) {
                return Err(self.shape_err("softmax-cross-entropy", format!("class {bad} out of {c}")));
            }
        }
        Ok(self.push(Op::SoftmaxXent(logits, targets), (1, 1)))
    }

    fn value_of(&self, id: NodeId) -> Result<&Mat<S>> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::Tape(format!("node {} has no value; run forward first", id.0)))
    }

    /// Value of a computed node. Errors if `forward` has not run.
    pub fn value(&self, id: NodeId) -> Result<&Mat<S>> {
        self.value_of(id)
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar_value(&self, id: NodeId) -> Result<S> {
        let v = self.value_of(id)?;
        if v.dim() != (1, 1) {
            return Err(Error::Tape(format!("node {} is not scalar: {:?}", id.0, v.dim())));
        }
        Ok(v[[0, 0]])
    }

    /// Compute every missing node value in tape order. Deterministic:
    /// identical leaves produce bit-identical outputs. Each value is
    /// checked for NaN/Inf; the first offending node aborts the pass.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].value.is_some() {
                continue;
            }
            let value = self.compute(i)?;
            check_finite_mat(&value, i, self.nodes[i].op.name())?;
            self.nodes[i].value = Some(value);
        }
        Ok(())
    }

    /// Forward pass returning the value of each requested root.
    pub fn forward_roots(&mut self, roots: &[NodeId]) -> Result<Vec<Mat<S>>> {
        self.forward()?;
        roots.iter().map(|&r| self.value_of(r).cloned()).collect()
    }

    fn compute(&self, i: usize) -> Result<Mat<S>> {
        let v = |id: NodeId| self.value_of(id);
        Ok(match &self.nodes[i].op {
            Op::Leaf { .. } => {
                return Err(Error::Tape(format!("leaf {i} has no bound value")));
            }
            Op::MatMul(a, b) => v(*a)?.dot(v(*b)?),
            Op::Add(a, b) => v(*a)? + v(*b)?,
            Op::Sub(a, b) => v(*a)? - v(*b)?,
            Op::Mul(a, b) => v(*a)? * v(*b)?,
            Op::Scale(x, c) => v(*x)?.mapv(|t| t * *c),
            Op::AddScalar(x, c) => v(*x)?.mapv(|t| t + *c),
            Op::Tanh(x) => v(*x)?.mapv(|t| t.tanh()),
            Op::Sigmoid(x) => v(*x)?.mapv(stable_sigmoid),
            Op::Exp(x) => v(*x)?.mapv(|t| t.exp()),
            Op::Log(x) => v(*x)?.mapv(|t| t.ln()),
            Op::Hinge(x) => v(*x)?.mapv(|t| if t > S::zero() { t } else { S::zero() }),
            Op::Clamp(x, lo, hi) => v(*x)?.mapv(|t| {
                if t < *lo {
                    *lo
                } else if t > *hi {
                    *hi
                } else {
                    t
                }
            }),
            Op::Concat(a, b) => concatenate(Axis(1), &[v(*a)?.view(), v(*b)?.view()])
                .map_err(|e| Error::Tape(format!("concat: {e}")))?,
            Op::SliceCols(x, lo, hi) => v(*x)?.slice(s![.., *lo..*hi]).to_owned(),
            Op::GatherRows(x, ids) => {
                let src = v(*x)?;
                let mut out = Mat::<S>::zeros((ids.len(), src.ncols()));
                for (r, &id) in ids.iter().enumerate() {
                    out.row_mut(r).assign(&src.row(id));
                }
                out
            }
            Op::BroadcastRows(x, n) => v(*x)?
                .broadcast((*n, self.nodes[i].shape.1))
                .expect("broadcast-rows")
                .to_owned(),
            Op::BroadcastCols(x, m) => v(*x)?
                .broadcast((self.nodes[i].shape.0, *m))
                .expect("broadcast-cols")
                .to_owned(),
            Op::SumAll(x) => Mat::from_elem((1, 1), v(*x)?.sum()),
            Op::MeanAll(x) => {
                let src = v(*x)?;
                let n = S::from_f64(src.len() as f64);
                Mat::from_elem((1, 1), src.sum() / n)
            }
            Op::SumRows(x) => v(*x)?.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::MeanRows(x) => {
                let src = v(*x)?;
                let n = S::from_f64(src.nrows() as f64);
                src.sum_axis(Axis(0)).insert_axis(Axis(0)).mapv(|t| t / n)
            }
            Op::SumCols(x) => v(*x)?.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::MeanCols(x) => {
                let src = v(*x)?;
                let n = S::from_f64(src.ncols() as f64);
                src.sum_axis(Axis(1)).insert_axis(Axis(1)).mapv(|t| t / n)
            }
            Op::SoftmaxXent(x, targets) => {
                let logits = v(*x)?;
                let mut total = S::zero();
                for (r, row) in logits.outer_iter().enumerate() {
                    if targets.rows[r].is_empty() {
                        continue;
                    }
                    let lse = log_sum_exp(row.iter().copied());
                    for &(cls, w) in &targets.rows[r] {
                        total = total + w * (lse - row[cls]);
                    }
                }
                Mat::from_elem((1, 1), total)
            }
        })
    }

    /// Reverse pass from a scalar seed. Resets all accumulators first, so
    /// repeated calls are independent. After the pass, every reached node's
    /// gradient has the same shape as its value.
    pub fn backward(&mut self, seed: NodeId) -> Result<()> {
        if self.shape(seed) != (1, 1) {
            return Err(Error::Tape(format!("backward seed {} is not scalar", seed.0)));
        }
        if self.nodes[seed.0].value.is_none() {
            return Err(Error::Tape("backward before forward".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[seed.0] = Some(Mat::from_elem((1, 1), S::one()));

        for i in (0..=seed.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` seed w.r.t. a node, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&Mat<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Mat<S>> {
        self.grads[id.0].take()
    }

    fn acc_owned(&mut self, id: NodeId, delta: Mat<S>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Mat<S>) -> Result<()> {
        // Clones of input values sidestep borrow conflicts; arrays are small.
        let val = |t: &Self, id: NodeId| -> Result<Mat<S>> { Ok(t.value_of(id)?.clone()) };
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let av = val(self, a)?;
                let bv = val(self, b)?;
                match &mut self.grads[a.0] {
                    Some(ga) => general_mat_mul(S::one(), g, &bv.t(), S::one(), ga),
                    slot @ None => *slot = Some(g.dot(&bv.t())),
                }
                match &mut self.grads[b.0] {
                    Some(gb) => general_mat_mul(S::one(), &av.t(), g, S::one(), gb),
                    slot @ None => *slot = Some(av.t().dot(g)),
                }
            }
            Op::Add(a, b) => {
                self.acc_owned(a, g.clone());
                self.acc_owned(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_owned(a, g.clone());
                self.acc_owned(b, g.mapv(|t| -t));
            }
            Op::Mul(a, b) => {
                let av = val(self, a)?;
                let bv = val(self, b)?;
                self.acc_owned(a, g * &bv);
                self.acc_owned(b, g * &av);
            }
            Op::Scale(x, c) => self.acc_owned(x, g.mapv(|t| t * c)),
            Op::AddScalar(x, _) => self.acc_owned(x, g.clone()),
            Op::Tanh(x) => {
                let y = val(self, NodeId(i))?;
                self.acc_owned(x, g * &y.mapv(|t| S::one() - t * t));
            }
            Op::Sigmoid(x) => {
                let y = val(self, NodeId(i))?;
                self.acc_owned(x, g * &y.mapv(|t| t * (S::one() - t)));
            }
            Op::Exp(x) => {
                let y = val(self, NodeId(i))?;
                self.acc_owned(x, g * &y);
            }
            Op::Log(x) => {
                let xv = val(self, x)?;
                self.acc_owned(x, g / &xv);
            }
            Op::Hinge(x) => {
                let xv = val(self, x)?;
                let mask = xv.mapv(|t| if t > S::zero() { S::one() } else { S::zero() });
                self.acc_owned(x, g * &mask);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(self, x)?;
                let mask = xv.mapv(|t| if t > lo && t < hi { S::one() } else { S::zero() });
                self.acc_owned(x, g * &mask);
            }
            Op::Concat(a, b) => {
                let ac = self.shape(a).1;
                self.acc_owned(a, g.slice(s![.., ..ac]).to_owned());
                self.acc_owned(b, g.slice(s![.., ac..]).to_owned());
            }
            Op::SliceCols(x, lo, hi) => {
                let shape = self.shape(x);
                let mut dx = Mat::<S>::zeros(shape);
                dx.slice_mut(s![.., lo..hi]).assign(g);
                self.acc_owned(x, dx);
            }
            Op::GatherRows(x, ref ids) => {
                let shape = self.shape(x);
                let mut dx = Mat::<S>::zeros(shape);
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = dx.row_mut(id);
                    dst += &g.row(r);
                }
                self.acc_owned(x, dx);
            }
            Op::BroadcastRows(x, _) => {
                self.acc_owned(x, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::BroadcastCols(x, _) => {
                self.acc_owned(x, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::SumAll(x) => {
                let shape = self.shape(x);
                self.acc_owned(x, Mat::from_elem(shape, g[[0, 0]]));
            }
            Op::MeanAll(x) => {
                let shape = self.shape(x);
                let n = S::from_f64((shape.0 * shape.1) as f64);
                self.acc_owned(x, Mat::from_elem(shape, g[[0, 0]] / n));
            }
            Op::SumRows(x) => {
                let shape = self.shape(x);
                let tiled = g.broadcast(shape).expect("sum-rows adjoint").to_owned();
                self.acc_owned(x, tiled);
            }
            Op::MeanRows(x) => {
                let shape = self.shape(x);
                let n = S::from_f64(shape.0 as f64);
                let tiled = g.broadcast(shape).expect("mean-rows adjoint").mapv(|t| t / n);
                self.acc_owned(x, tiled);
            }
            Op::SumCols(x) => {
                let shape = self.shape(x);
                let tiled = g.broadcast(shape).expect("sum-cols adjoint").to_owned();
                self.acc_owned(x, tiled);
            }
            Op::MeanCols(x) => {
                let shape = self.shape(x);
                let n = S::from_f64(shape.1 as f64);
                let tiled = g.broadcast(shape).expect("mean-cols adjoint").mapv(|t| t / n);
                self.acc_owned(x, tiled);
            }
            Op::SoftmaxXent(x, ref targets) => {
                let logits = val(self, x)?;
                let seed = g[[0, 0]];
                let mut dx = Mat::<S>::zeros(logits.dim());
                for (r, row) in logits.outer_iter().enumerate() {
                    let entries = &targets.rows[r];
                    if entries.is_empty() {
                        continue;
                    }
                    let wsum = entries.iter().fold(S::zero(), |acc, &(_, w)| acc + w);
                    let lse = log_sum_exp(row.iter().copied());
                    for (c, &v) in row.iter().enumerate() {
                        dx[[r, c]] = seed * wsum * (v - lse).exp();
                    }
                    for &(cls, w) in entries {
                        dx[[r, cls]] = dx[[r, cls]] - seed * w;
                    }
                }
                self.acc_owned(x, dx);
            }
        }
        Ok(())
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn log_sum_exp<S: Scalar>(values: impl Iterator<Item = S> + Clone) -> S {
    let max = values
        .clone()
        .fold(S::neg_infinity(), |acc, v| if v > acc { v } else { acc });
    let sum = values.fold(S::zero(), |acc, v| acc + (v - max).exp());
    max + sum.ln()
}

fn check_finite_mat<S: Scalar>(m: &Mat<S>, node: usize, op: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { node, op })
    }
}

/// Sum gradient sets from independent tapes in a fixed order, so the result
/// does not depend on how work was sharded.
pub fn merge_grads<S: Scalar>(mut sets: Vec<Vec<Mat<S>>>) -> Result<Vec<Mat<S>>> {
    let Some(mut acc) = (!sets.is_empty()).then(|| sets.remove(0)) else {
        return Err(Error::Tape("merge_grads on empty set".into()));
    };
    for set in sets {
        if set.len() != acc.len() {
            return Err(Error::Tape("merge_grads: mismatched set sizes".into()));
        }
        for (a, b) in acc.iter_mut().zip(set) {
            if a.dim() != b.dim() {
                return Err(Error::Shape { op: "merge-grads", detail: format!("{:?} vs {:?}", a.dim(), b.dim()) });
            }
            *a += &b;
        }
    }
    Ok(acc)
}
