//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt on every forward pass (define-by-run). Values live
//! in the tape's arena and are addressed through copyable [`Var`] handles.
//! Only the operations the losses in this crate need are provided; tensors
//! are at most two-dimensional and row-major.

mod gradcheck;

pub use gradcheck::{check_gradients, relative_error, GradCheckKind};

use crate::error::{invalid, DdnError, Result};
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-12;

/// Dense row-major tensor with an attached gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!(
                "tensor shape must have one or two positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DdnError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            grad: vec![T::zero(); numel],
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: vec![T::zero()],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DdnError::ShapeMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Rows and columns, treating a 1-D tensor as a single row.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("shape validated at construction"),
        }
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation kinds a tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<T> {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    /// Elementwise; the right operand may also be a scalar or a row vector
    /// broadcast over the rows of the left operand.
    Add,
    /// Elementwise product with the same broadcasting rules as `Add`.
    Mul,
    Scale(T),
    Relu,
    /// `None` reduces everything to a scalar; `Some(axis)` removes that axis.
    Mean(Option<usize>),
    /// Normalizes each row (or the whole vector for 1-D input).
    L2Normalize,
    /// Row-wise cosine similarity `[n,d] x [n,d] -> [n]`; either side may be
    /// a single row broadcast against the other.
    CosineSimilarity,
    Exp,
    Ln,
    /// Along the last axis: `[n,k] -> [n]`, `[k] -> [1]`.
    LogSumExp,
    /// Along the first axis.
    Concat,
    /// Along the last axis.
    Softmax,
    /// Mean negative log-likelihood of softmax(logits) at the given targets,
    /// one target per row.
    SoftmaxNll(Vec<usize>),
    /// Rows `start..end` of a matrix.
    SliceRows(usize, usize),
    /// Identity forward, no gradient backward.
    Detach,
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Mean(_) => "mean",
            OpKind::L2Normalize => "l2-normalize",
            OpKind::CosineSimilarity => "cosine-similarity",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::LogSumExp => "log-sum-exp",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxNll(_) => "softmax-nll",
            OpKind::SliceRows(..) => "slice-rows",
            OpKind::Detach => "detach",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Option<(OpKind<T>, Vec<Var>)>,
}

/// Ordered record of a forward pass. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, detail: String) -> DdnError {
    DdnError::ShapeMismatch { op, detail }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let bn: usize = b.iter().product();
    if a == b {
        Ok(Broadcast::Same)
    } else if bn == 1 {
        Ok(Broadcast::Scalar)
    } else if a.len() == 2 && (b == [a[1]] || b == [1, a[1]]) {
        Ok(Broadcast::Row)
    } else {
        Err(mismatch(op, format!("cannot broadcast {b:?} onto {a:?}")))
    }
}

fn bcast_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % cols,
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Max-shifted log-sum-exp of one row.
pub(crate) fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor (input or parameter).
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node { tensor, op: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Records a leaf that accumulates gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.grad
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].tensor.item()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.tensor.zero_grad());
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(invalid(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind<T>, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        let arity_ok = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::CosineSimilarity => {
                inputs.len() == 2
            }
            OpKind::Concat => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(invalid(format!(
                "{} got {} inputs",
                kind.name(),
                inputs.len()
            )));
        }
        let (shape, data) = self.forward(&kind, inputs)?;
        let requires_grad = match kind {
            OpKind::Detach => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad),
        };
        let tensor = Tensor::new(shape, data)?.with_grad(requires_grad);
        self.nodes.push(Node {
            tensor,
            op: Some((kind, inputs.to_vec())),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, kind: &OpKind<T>, inputs: &[Var]) -> Result<(Vec<usize>, Vec<T>)> {
        let t = |i: usize| &self.nodes[inputs[i].0].tensor;
        let a = t(0);
        match kind {
            OpKind::MatMul => {
                let b = t(1);
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(mismatch(
                        "matmul",
                        format!("{:?} x {:?}", a.shape, b.shape),
                    ));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![T::zero(); n * m];
                for i in 0..n {
                    let row = &mut out[i * m..(i + 1) * m];
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        let brow = &b.data[p * m..(p + 1) * m];
                        for (o, &bv) in row.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
                Ok((vec![n, m], out))
            }
            OpKind::Add | OpKind::Mul => {
                let b = t(1);
                let bk = broadcast_kind(kind.name(), &a.shape, &b.shape)?;
                let cols = a.last_dim();
                let add = matches!(kind, OpKind::Add);
                let out = a
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = b.data[bcast_index(bk, i, cols)];
                        if add {
                            x + y
                        } else {
                            x * y
                        }
                    })
                    .collect();
                Ok((a.shape.clone(), out))
            }
            OpKind::Scale(c) => Ok((a.shape.clone(), a.data.iter().map(|&x| x * *c).collect())),
            OpKind::Relu => Ok((
                a.shape.clone(),
                a.data
                    .iter()
                    .map(|&x| if x > T::zero() { x } else { T::zero() })
                    .collect(),
            )),
            OpKind::Exp => Ok((a.shape.clone(), a.data.iter().map(|x| x.exp()).collect())),
            OpKind::Ln => {
                if a.data.iter().any(|&x| x <= T::zero()) {
                    return Err(invalid("ln of a non-positive value"));
                }
                Ok((a.shape.clone(), a.data.iter().map(|x| x.ln()).collect()))
            }
            OpKind::Detach => Ok((a.shape.clone(), a.data.clone())),
            OpKind::Mean(axis) => {
                let (r, c) = a.rows_cols();
                match (axis, a.shape.len()) {
                    (None, _) | (Some(0), 1) => {
                        let s = a.data.iter().fold(T::zero(), |acc, &x| acc + x);
                        Ok((vec![1], vec![s / T::of_usize(a.numel())]))
                    }
                    (Some(0), 2) => {
                        let mut out = vec![T::zero(); c];
                        for i in 0..r {
                            for (o, &x) in out.iter_mut().zip(&a.data[i * c..(i + 1) * c]) {
                                *o += x;
                            }
                        }
                        let n = T::of_usize(r);
                        Ok((vec![c], out.into_iter().map(|s| s / n).collect()))
                    }
                    (Some(1), 2) => {
                        let n = T::of_usize(c);
                        let out = a
                            .data
                            .chunks(c)
                            .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x) / n)
                            .collect();
                        Ok((vec![r], out))
                    }
                    _ => Err(mismatch("mean", format!("axis {axis:?} on {:?}", a.shape))),
                }
            }
            OpKind::L2Normalize => {
                let c = a.last_dim();
                let mut out = Vec::with_capacity(a.numel());
                for row in a.data.chunks(c) {
                    let nr = norm(row);
                    if nr.as_f64() <= NORM_EPS {
                        return Err(DdnError::DegenerateNorm { op: "l2-normalize" });
                    }
                    out.extend(row.iter().map(|&x| x / nr));
                }
                Ok((a.shape.clone(), out))
            }
            OpKind::CosineSimilarity => {
                let b = t(1);
                let (ra, ca) = a.rows_cols();
                let (rb, cb) = b.rows_cols();
                if ca != cb || !(ra == rb || ra == 1 || rb == 1) {
                    return Err(mismatch(
                        "cosine-similarity",
                        format!("{:?} vs {:?}", a.shape, b.shape),
                    ));
                }
                let n = ra.max(rb);
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let ar = &a.data[(i % ra) * ca..(i % ra + 1) * ca];
                    let br = &b.data[(i % rb) * cb..(i % rb + 1) * cb];
                    let (na, nb) = (norm(ar), norm(br));
                    if na.as_f64() <= NORM_EPS || nb.as_f64() <= NORM_EPS {
                        return Err(DdnError::DegenerateNorm {
                            op: "cosine-similarity",
                        });
                    }
                    out.push(dot(ar, br) / (na * nb));
                }
                Ok((vec![n], out))
            }
            OpKind::LogSumExp => {
                let (r, c) = a.rows_cols();
                let out = a.data.chunks(c).map(logsumexp_row).collect();
                Ok((vec![if a.shape.len() == 1 { 1 } else { r }], out))
            }
            OpKind::Softmax => {
                let c = a.last_dim();
                Ok((
                    a.shape.clone(),
                    a.data.chunks(c).flat_map(softmax_row).collect(),
                ))
            }
            OpKind::SoftmaxNll(targets) => {
                let (r, c) = a.rows_cols();
                if targets.len() != r {
                    return Err(mismatch(
                        "softmax-nll",
                        format!("{} targets for {r} rows", targets.len()),
                    ));
                }
                if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
                    return Err(invalid(format!("target {bad} out of range for {c} classes")));
                }
                let mut total = T::zero();
                for (row, &y) in a.data.chunks(c).zip(targets) {
                    total += logsumexp_row(row) - row[y];
                }
                Ok((vec![1], vec![total / T::of_usize(r)]))
            }
            OpKind::Concat => {
                let first = t(0);
                let one_d = first.shape.len() == 1;
                let cols = first.last_dim();
                let mut rows = 0;
                let mut data = Vec::new();
                for i in 0..inputs.len() {
                    let x = t(i);
                    let ok = if one_d {
                        x.shape.len() == 1
                    } else {
                        x.shape.len() == 2 && x.shape[1] == cols
                    };
                    if !ok {
                        return Err(mismatch(
                            "concat",
                            format!("{:?} after {:?}", x.shape, first.shape),
                        ));
                    }
                    rows += x.shape[0];
                    data.extend_from_slice(&x.data);
                }
                let shape = if one_d { vec![rows] } else { vec![rows, cols] };
                Ok((shape, data))
            }
            OpKind::SliceRows(start, end) => {
                if a.shape.len() != 2 || start >= end || *end > a.shape[0] {
                    return Err(mismatch(
                        "slice-rows",
                        format!("rows {start}..{end} of {:?}", a.shape),
                    ));
                }
                let c = a.shape[1];
                Ok((vec![end - start, c], a.data[start * c..end * c].to_vec()))
            }
        }
    }

    /// Back-propagates from a scalar `loss`. Gradients accumulate into every
    /// leaf that requires them; intermediate gradients are reset first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        let lt = &self.nodes[loss.0].tensor;
        if lt.numel() != 1 {
            return Err(DdnError::NotScalar(lt.shape.clone()));
        }
        for node in self.nodes.iter_mut().filter(|n| n.op.is_some()) {
            node.tensor.zero_grad();
        }
        self.nodes[loss.0].tensor.grad[0] = T::one();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some((kind, inputs)) = &node.op else {
                continue;
            };
            if !node.tensor.requires_grad {
                continue;
            }
            let inputs = inputs.clone();
            let contribs = self.local_backward(kind, &inputs, idx);
            for (input, contrib) in inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    let g = &mut self.nodes[input.0].tensor.grad;
                    for (gi, ci) in g.iter_mut().zip(c) {
                        *gi += ci;
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_backward(&self, kind: &OpKind<T>, inputs: &[Var], idx: usize) -> Vec<Option<Vec<T>>> {
        let out = &self.nodes[idx].tensor;
        let g = &out.grad;
        let t = |i: usize| &self.nodes[inputs[i].0].tensor;
        let wants = |i: usize| t(i).requires_grad;
        let a = t(0);
        match kind {
            OpKind::MatMul => {
                let b = t(1);
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let da = wants(0).then(|| {
                    let mut da = vec![T::zero(); n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            da[i * k + p] = dot(grow, &b.data[p * m..(p + 1) * m]);
                        }
                    }
                    da
                });
                let db = wants(1).then(|| {
                    let mut db = vec![T::zero(); k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = a.data[i * k + p];
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Add | OpKind::Mul => {
                let b = t(1);
                let bk = broadcast_kind(kind.name(), &a.shape, &b.shape)
                    .expect("validated in forward");
                let cols = a.last_dim();
                let add = matches!(kind, OpKind::Add);
                let da = wants(0).then(|| {
                    if add {
                        g.clone()
                    } else {
                        g.iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * b.data[bcast_index(bk, i, cols)])
                            .collect()
                    }
                });
                let db = wants(1).then(|| {
                    let mut db = vec![T::zero(); b.numel()];
                    for (i, &gv) in g.iter().enumerate() {
                        let j = bcast_index(bk, i, cols);
                        db[j] += if add { gv } else { gv * a.data[i] };
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Scale(c) => vec![Some(g.iter().map(|&gv| gv * *c).collect())],
            OpKind::Relu => vec![Some(
                g.iter()
                    .zip(&a.data)
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect(),
            )],
            OpKind::Exp => vec![Some(g.iter().zip(&out.data).map(|(&gv, &y)| gv * y).collect())],
            OpKind::Ln => vec![Some(g.iter().zip(&a.data).map(|(&gv, &x)| gv / x).collect())],
            OpKind::Detach => vec![None],
            OpKind::Mean(axis) => {
                let (r, c) = a.rows_cols();
                let da = match (axis, a.shape.len()) {
                    (None, _) | (Some(0), 1) => {
                        let v = g[0] / T::of_usize(a.numel());
                        vec![v; a.numel()]
                    }
                    (Some(0), _) => {
                        let n = T::of_usize(r);
                        (0..r * c).map(|i| g[i % c] / n).collect()
                    }
                    _ => {
                        let n = T::of_usize(c);
                        (0..r * c).map(|i| g[i / c] / n).collect()
                    }
                };
                vec![Some(da)]
            }
            OpKind::L2Normalize => {
                let c = a.last_dim();
                let mut da = Vec::with_capacity(a.numel());
                for ((xr, yr), gr) in a.data.chunks(c).zip(out.data.chunks(c)).zip(g.chunks(c)) {
                    let nr = norm(xr);
                    let yg = dot(yr, gr);
                    da.extend(yr.iter().zip(gr).map(|(&y, &gv)| (gv - y * yg) / nr));
                }
                vec![Some(da)]
            }
            OpKind::CosineSimilarity => {
                let b = t(1);
                let (ra, c) = a.rows_cols();
                let (rb, _) = b.rows_cols();
                let mut da = vec![T::zero(); a.numel()];
                let mut db = vec![T::zero(); b.numel()];
                for (i, (&gv, &cos)) in g.iter().zip(&out.data).enumerate() {
                    let (ia, ib) = (i % ra, i % rb);
                    let ar = &a.data[ia * c..(ia + 1) * c];
                    let br = &b.data[ib * c..(ib + 1) * c];
                    let (na, nb) = (norm(ar), norm(br));
                    let inv = T::one() / (na * nb);
                    for p in 0..c {
                        da[ia * c + p] += gv * (br[p] * inv - cos * ar[p] / (na * na));
                        db[ib * c + p] += gv * (ar[p] * inv - cos * br[p] / (nb * nb));
                    }
                }
                vec![wants(0).then_some(da), wants(1).then_some(db)]
            }
            OpKind::LogSumExp => {
                let c = a.last_dim();
                let da = a
                    .data
                    .chunks(c)
                    .zip(g)
                    .flat_map(|(row, &gv)| softmax_row(row).into_iter().map(move |p| p * gv))
                    .collect();
                vec![Some(da)]
            }
            OpKind::Softmax => {
                let c = a.last_dim();
                let da = out
                    .data
                    .chunks(c)
                    .zip(g.chunks(c))
                    .flat_map(|(yr, gr)| {
                        let yg = dot(yr, gr);
                        yr.iter()
                            .zip(gr)
                            .map(move |(&y, &gv)| y * (gv - yg))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                vec![Some(da)]
            }
            OpKind::SoftmaxNll(targets) => {
                let (r, c) = a.rows_cols();
                let scale = g[0] / T::of_usize(r);
                let mut da = Vec::with_capacity(r * c);
                for (row, &y) in a.data.chunks(c).zip(targets) {
                    for (j, p) in softmax_row(row).into_iter().enumerate() {
                        let target = if j == y { T::one() } else { T::zero() };
                        da.push((p - target) * scale);
                    }
                }
                vec![Some(da)]
            }
            OpKind::Concat => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|v| {
                        let x = &self.nodes[v.0].tensor;
                        let part = g[offset..offset + x.numel()].to_vec();
                        offset += x.numel();
                        x.requires_grad.then_some(part)
                    })
                    .collect()
            }
            OpKind::SliceRows(start, end) => {
                let c = a.shape[1];
                let mut da = vec![T::zero(); a.numel()];
                da[start * c..end * c].copy_from_slice(g);
                vec![Some(da)]
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(OpKind::Mean(axis), &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::L2Normalize, &[a])
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::CosineSimilarity, &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Ln, &[a])
    }

    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSumExp, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn softmax_nll(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::SoftmaxNll(targets), &[logits])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows(start, end), &[a])
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Detach, &[a])
    }
}
