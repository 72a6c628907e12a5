use super::tensor::{log_sum_exp, row_max, softmax_rows};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine { a: Var, mul: f64, add: f64 },
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    LayerNorm { a: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize, len: usize },
    Transpose(Var),
    BlockMix { y: Var, weights: Var },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Affine { .. } => "affine",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::BlockMix { .. } => "block_mix",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::BlockMix { y, weights } => vec![*y, *weights],
            Op::Affine { a, .. }
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::LayerNorm { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass walks it in reverse.
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Builds an expression on a fresh tape and returns its value with the tape.
    pub fn record<F>(build: F) -> Result<(Tensor<S>, Tape<S>, Var)>
    where
        F: FnOnce(&mut Tape<S>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let out = build(&mut tape)?;
        Ok((tape.value(out).clone(), tape, out))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn param(&mut self, t: Tensor<S>) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Non-differentiable input (masks, constants).
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { requires_grad },
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Replaces the value of a leaf. Call [`Tape::replay`] to refresh dependents.
    pub fn set_leaf(&mut self, v: Var, t: Tensor<S>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::InvalidArgument("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), t.shape()));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        node.value = t;
        Ok(())
    }

    /// Re-evaluates every recorded operation from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            a_t: false,
            b_t: false,
        })
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            a_t: false,
            b_t: true,
        })
    }

    /// `aᵀ · b`.
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            a_t: true,
            b_t: false,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds `row` to every row of `a` (bias-add over the leading axis).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    /// `mul · a + add`, elementwise with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        self.push(Op::Affine { a, mul, add })
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Result<Var> {
        self.affine(a, mul, 0.0)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { a, eps })
    }

    /// Gathers rows of `table` (vocab × d) into an `ids.len()` × d matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { a, start, len })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceRows { a, start, len })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    /// For `y` of shape n×(k·m) and `weights` of shape n×k, returns the n×m
    /// matrix whose row i is `Σ_j weights[i,j] · y[i, j·m..(j+1)·m]`.
    pub fn block_mix(&mut self, y: Var, weights: Var) -> Result<Var> {
        self.push(Op::BlockMix { y, weights })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    fn eval(&self, op: &Op) -> Result<Tensor<S>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
            Op::MatMul { a, b, a_t, b_t } => {
                let (a, b) = (val(a), val(b));
                let (m, k, k2, n) = matmul_dims(a, *a_t, b, *b_t)?;
                if k != k2 {
                    return Err(Error::shape("matmul", a.shape(), b.shape()));
                }
                let mut out = vec![S::zero(); m * n];
                S::gemm(m, k, n, a.data(), *a_t, b.data(), *b_t, &mut out, false);
                Tensor::from_parts(vec![m, n], out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                if x.shape() != y.shape() {
                    return Err(Error::shape(op.name(), x.shape(), y.shape()));
                }
                let data = x.data().iter().zip(y.data());
                let data: Vec<S> = match op {
                    Op::Add(..) => data.map(|(&p, &q)| p + q).collect(),
                    Op::Sub(..) => data.map(|(&p, &q)| p - q).collect(),
                    _ => data.map(|(&p, &q)| p * q).collect(),
                };
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let (x, row) = (val(a), val(r));
                if row.numel() != x.cols() {
                    return Err(Error::shape(op.name(), x.shape(), row.shape()));
                }
                let is_add = matches!(op, Op::AddRow(..));
                let mut data = x.data().to_vec();
                for chunk in data.chunks_mut(x.cols()) {
                    for (v, &b) in chunk.iter_mut().zip(row.data()) {
                        if is_add {
                            *v += b;
                        } else {
                            *v *= b;
                        }
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::Affine { a, mul, add } => {
                let (m, c) = (S::from_f64(*mul), S::from_f64(*add));
                val(a).map(|v| m * v + c)
            }
            Op::Softmax(a) => softmax_rows(val(a)),
            Op::Log(a) => {
                let x = val(a);
                if x.data().iter().any(|v| v.re() <= 0.0) {
                    return Err(Error::NonFinite { op: "log" });
                }
                x.map(S::ln)
            }
            Op::Exp(a) => val(a).map(S::exp),
            Op::Relu(a) => val(a).map(|v| if v.re() > 0.0 { v } else { S::zero() }),
            Op::LayerNorm { a, eps } => {
                let x = val(a);
                let cols = x.cols();
                let mut out = Vec::with_capacity(x.numel());
                for row in x.data().chunks(cols) {
                    let (mean, rstd) = row_stats(row, *eps);
                    out.extend(row.iter().map(|&v| (v - mean) * rstd));
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            Op::Embedding { table, ids } => {
                let t = val(table);
                if t.shape().len() != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "embedding table must be 2-d, got {:?}",
                        t.shape()
                    )));
                }
                if ids.is_empty() {
                    return Err(Error::Empty("embedding ids"));
                }
                let (vocab, d) = (t.shape()[0], t.shape()[1]);
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= vocab {
                        return Err(Error::OutOfRange {
                            what: "vocabulary",
                            index: id,
                            size: vocab,
                        });
                    }
                    out.extend_from_slice(t.row(id));
                }
                Tensor::from_parts(vec![ids.len(), d], out)
            }
            Op::ConcatCols(parts) => {
                let first = parts.first().ok_or(Error::Empty("concat_cols inputs"))?;
                let rows = val(first).rows();
                let mut total = 0;
                for p in parts {
                    let t = val(p);
                    if t.rows() != rows || t.shape().len() != 2 {
                        return Err(Error::shape("concat_cols", val(first).shape(), t.shape()));
                    }
                    total += t.cols();
                }
                let mut out = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for p in parts {
                        out.extend_from_slice(val(p).row(i));
                    }
                }
                Tensor::from_parts(vec![rows, total], out)
            }
            Op::SliceCols { a, start, len } => {
                let x = val(a);
                if *len == 0 || start + len > x.cols() || x.shape().len() != 2 {
                    return Err(Error::shape("slice_cols", x.shape(), &[*start, *len]));
                }
                let mut out = Vec::with_capacity(x.rows() * len);
                for i in 0..x.rows() {
                    out.extend_from_slice(&x.row(i)[*start..start + len]);
                }
                Tensor::from_parts(vec![x.rows(), *len], out)
            }
            Op::ConcatRows(parts) => {
                let first = parts.first().ok_or(Error::Empty("concat_rows inputs"))?;
                let cols = val(first).cols();
                let mut out = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = val(p);
                    if t.cols() != cols || t.shape().len() != 2 {
                        return Err(Error::shape("concat_rows", val(first).shape(), t.shape()));
                    }
                    rows += t.rows();
                    out.extend_from_slice(t.data());
                }
                Tensor::from_parts(vec![rows, cols], out)
            }
            Op::SliceRows { a, start, len } => {
                let x = val(a);
                if *len == 0 || start + len > x.rows() || x.shape().len() != 2 {
                    return Err(Error::shape("slice_rows", x.shape(), &[*start, *len]));
                }
                let c = x.cols();
                Tensor::from_parts(vec![*len, c], x.data()[start * c..(start + len) * c].to_vec())
            }
            Op::Transpose(a) => {
                let x = val(a);
                if x.shape().len() != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "transpose needs a 2-d tensor, got {:?}",
                        x.shape()
                    )));
                }
                let (r, c) = (x.rows(), x.cols());
                let mut out = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x.data()[i * c + j];
                    }
                }
                Tensor::from_parts(vec![c, r], out)
            }
            Op::BlockMix { y, weights } => {
                let (y, w) = (val(y), val(weights));
                let k = w.cols();
                if y.rows() != w.rows() || y.cols() % k != 0 {
                    return Err(Error::shape("block_mix", y.shape(), w.shape()));
                }
                let m = y.cols() / k;
                let mut out = vec![S::zero(); y.rows() * m];
                for i in 0..y.rows() {
                    let (yr, wr) = (y.row(i), w.row(i));
                    let o = &mut out[i * m..(i + 1) * m];
                    for (j, &wj) in wr.iter().enumerate() {
                        for (ov, &yv) in o.iter_mut().zip(&yr[j * m..(j + 1) * m]) {
                            *ov += wj * yv;
                        }
                    }
                }
                Tensor::from_parts(vec![y.rows(), m], out)
            }
            Op::CrossEntropy { logits, targets } => {
                let x = val(logits);
                if targets.len() != x.rows() {
                    return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
                }
                let mut total = S::zero();
                for (i, &t) in targets.iter().enumerate() {
                    if t >= x.cols() {
                        return Err(Error::OutOfRange {
                            what: "cross-entropy classes",
                            index: t,
                            size: x.cols(),
                        });
                    }
                    let row = x.row(i);
                    total += log_sum_exp(row) - row[t];
                }
                Tensor::scalar(total / S::from_f64(targets.len() as f64))
            }
            Op::Sum(a) => {
                let mut total = S::zero();
                for &v in val(a).data() {
                    total += v;
                }
                Tensor::scalar(total)
            }
            Op::Mean(a) => {
                let x = val(a);
                let mut total = S::zero();
                for &v in x.data() {
                    total += v;
                }
                Tensor::scalar(total / S::from_f64(x.numel() as f64))
            }
        };
        if !out.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(out)
    }

    /// Propagates `seed` (the gradient of some objective w.r.t. `output`)
    /// back to every differentiable node. A tape can be consumed only once.
    pub fn backward(&mut self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward seed", seed.shape(), self.value(output).shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_op(&node.op, &node.value, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf { requires_grad: true }) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Convenience for scalar objectives: seed of one.
    pub fn backward_scalar(&mut self, output: Var) -> Result<Gradients<S>> {
        let shape = self.value(output).shape().to_vec();
        self.backward(output, Tensor::full(&shape, S::one()))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(
        &self,
        op: &Op,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (val(a), val(b));
                let (m, k, _, n) = matmul_dims(av, *a_t, bv, *b_t).expect("checked in forward");
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    if *a_t {
                        // A is stored k×m: dA = op(B) · gᵀ
                        S::gemm(k, n, m, bv.data(), *b_t, g.data(), true, &mut da, false);
                    } else {
                        S::gemm(m, n, k, g.data(), false, bv.data(), !*b_t, &mut da, false);
                    }
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    if *b_t {
                        // B is stored n×k: dB = gᵀ · op(A)
                        S::gemm(n, m, k, g.data(), true, av.data(), *a_t, &mut db, false);
                    } else {
                        S::gemm(k, m, n, av.data(), !*a_t, g.data(), false, &mut db, false);
                    }
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, zip_map(g, val(b), |p, q| p * q));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, zip_map(g, val(a), |p, q| p * q));
                }
            }
            Op::AddRow(a, r) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*r) {
                    let row = val(r);
                    let mut dr = vec![S::zero(); row.numel()];
                    for chunk in g.data().chunks(g.cols()) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *r, Tensor::from_parts(row.shape().to_vec(), dr));
                }
            }
            Op::MulRow(a, r) => {
                let (x, row) = (val(a), val(r));
                let cols = x.cols();
                if self.needs(*a) {
                    let mut da = g.data().to_vec();
                    for chunk in da.chunks_mut(cols) {
                        for (d, &w) in chunk.iter_mut().zip(row.data()) {
                            *d *= w;
                        }
                    }
                    accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), da));
                }
                if self.needs(*r) {
                    let mut dr = vec![S::zero(); row.numel()];
                    for (gc, xc) in g.data().chunks(cols).zip(x.data().chunks(cols)) {
                        for ((d, &gv), &xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xv;
                        }
                    }
                    accumulate(grads, *r, Tensor::from_parts(row.shape().to_vec(), dr));
                }
            }
            Op::Affine { a, mul, .. } => {
                let m = S::from_f64(*mul);
                accumulate(grads, *a, g.map(|v| v * m));
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut dx = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let mut dot = S::zero();
                    for (&y, &gv) in yr.iter().zip(gr) {
                        dot += y * gv;
                    }
                    dx.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - dot)));
                }
                accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::Log(a) => accumulate(grads, *a, zip_map(g, val(a), |p, q| p / q)),
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, out, |p, q| p * q)),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                zip_map(g, val(a), |p, q| if q.re() > 0.0 { p } else { S::zero() }),
            ),
            Op::LayerNorm { a, eps } => {
                let x = val(a);
                let cols = x.cols();
                let inv_n = S::from_f64(1.0 / cols as f64);
                let mut dx = Vec::with_capacity(x.numel());
                for ((xr, yr), gr) in x
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let (_, rstd) = row_stats(xr, *eps);
                    let mut mean_g = S::zero();
                    let mut mean_gy = S::zero();
                    for (&y, &gv) in yr.iter().zip(gr) {
                        mean_g += gv;
                        mean_gy += gv * y;
                    }
                    mean_g = mean_g * inv_n;
                    mean_gy = mean_gy * inv_n;
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&y, &gv)| rstd * (gv - mean_g - y * mean_gy)),
                    );
                }
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Embedding { table, ids } => {
                let t = val(table);
                let d = t.cols();
                let mut dt = vec![S::zero(); t.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for (dv, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(t.shape().to_vec(), dt));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            dp.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        accumulate(grads, *p, Tensor::from_parts(vec![rows, c], dp));
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start, len } => {
                let x = val(a);
                let c = x.cols();
                let mut dx = vec![S::zero(); x.numel()];
                for i in 0..x.rows() {
                    dx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let r = val(p).rows();
                    if self.needs(*p) {
                        let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        accumulate(grads, *p, Tensor::from_parts(vec![r, cols], slice));
                    }
                    offset += r;
                }
            }
            Op::SliceRows { a, start, len } => {
                let x = val(a);
                let c = x.cols();
                let mut dx = vec![S::zero(); x.numel()];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g.data()[i * c + j];
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(vec![c, r], dx));
            }
            Op::BlockMix { y, weights } => {
                let (yv, wv) = (val(y), val(weights));
                let k = wv.cols();
                let m = g.cols();
                if self.needs(*y) {
                    let mut dy = vec![S::zero(); yv.numel()];
                    for i in 0..yv.rows() {
                        let gr = g.row(i);
                        for (j, &wj) in wv.row(i).iter().enumerate() {
                            let base = i * k * m + j * m;
                            for (d, &gv) in dy[base..base + m].iter_mut().zip(gr) {
                                *d = wj * gv;
                            }
                        }
                    }
                    accumulate(grads, *y, Tensor::from_parts(yv.shape().to_vec(), dy));
                }
                if self.needs(*weights) {
                    let mut dw = vec![S::zero(); wv.numel()];
                    for i in 0..yv.rows() {
                        let (gr, yr) = (g.row(i), yv.row(i));
                        for j in 0..k {
                            let mut dot = S::zero();
                            for (&gv, &y) in gr.iter().zip(&yr[j * m..(j + 1) * m]) {
                                dot += gv * y;
                            }
                            dw[i * k + j] = dot;
                        }
                    }
                    accumulate(grads, *weights, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let x = val(logits);
                let scale = g.item() / S::from_f64(targets.len() as f64);
                let cols = x.cols();
                let mut dx = Vec::with_capacity(x.numel());
                for (i, &t) in targets.iter().enumerate() {
                    let row = x.row(i);
                    let max = row_max(row);
                    let mut total = S::zero();
                    let start = dx.len();
                    for &v in row {
                        let e = (v - max).exp();
                        total += e;
                        dx.push(e);
                    }
                    for (j, d) in dx[start..start + cols].iter_mut().enumerate() {
                        let p = *d / total;
                        let onehot = if j == t { S::one() } else { S::zero() };
                        *d = (p - onehot) * scale;
                    }
                }
                accumulate(grads, *logits, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Sum(a) => {
                let x = val(a);
                accumulate(grads, *a, Tensor::full(x.shape(), g.item()));
            }
            Op::Mean(a) => {
                let x = val(a);
                let v = g.item() / S::from_f64(x.numel() as f64);
                accumulate(grads, *a, Tensor::full(x.shape(), v));
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn row_stats<S: Scalar>(row: &[S], eps: f64) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, S::one() / (var + S::from_f64(eps)).sqrt())
}

fn matmul_dims<S: Scalar>(
    a: &Tensor<S>,
    a_t: bool,
    b: &Tensor<S>,
    b_t: bool,
) -> Result<(usize, usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
    Ok((m, k, k2, n))
}
