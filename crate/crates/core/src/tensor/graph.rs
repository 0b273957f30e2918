use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Which operand (if any) is a broadcast scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Sqrt,
    Gelu,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Broadcast, Var, Var),
    Scale(Var, f64),
    Unary(UnaryKind, Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ReplaceRows { base: Var, token: Var, rows: Vec<usize> },
    ConcatRows(Var, Var),
    RowMean(Var),
    SmoothL1 { x: Var, beta: f64 },
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Scan(ScanSaved),
}

#[derive(Debug)]
struct ScanSaved {
    q: Var,
    k: Var,
    v: Var,
    delta: Var,
    alpha: Var,
    /// Decay factor per token.
    decay: Vec<f64>,
    /// State after each token, `L` blocks of `d×d`.
    states: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::Unary(UnaryKind::Exp, _) => "exp",
            Op::Unary(UnaryKind::Sqrt, _) => "sqrt",
            Op::Unary(UnaryKind::Gelu, _) => "gelu",
            Op::Unary(UnaryKind::Softplus, _) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::RowMean(_) => "row_mean",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Scan(_) => "mamba2_scan",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Binary(_, _, a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Unary(_, a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::RowMean(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNormRows { x, .. } | Op::NormalizeRows { x, .. } | Op::SmoothL1 { x, .. } => {
                vec![*x]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ReplaceRows { base, token, .. } => vec![*base, *token],
            Op::Scan(s) => vec![s.q, s.k, s.v, s.delta, s.alpha],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Node ids are assigned in creation order, which is
/// a topological order of the recorded dataflow.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-6;
/// Feature vectors with a smaller ℓ2 norm are treated as degenerate.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

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

    /// Records an input. Gradients flow into it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Moves a leaf's tensor (with its gradient) out, leaving an empty placeholder.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Op name of every recorded node, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("output of {} at flat index {i}", op.name()),
            });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        self.push(vec![c, r], out, Op::Transpose(a))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Broadcast::None
        } else if ta.is_scalar() {
            Broadcast::Lhs
        } else if tb.is_scalar() {
            Broadcast::Rhs
        } else {
            let name = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(self.shape_err(name, a, b));
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (shape, out): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::None => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Lhs => {
                let s = ta.item();
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(s, y)).collect())
            }
            Broadcast::Rhs => {
                let s = tb.item();
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, s)).collect())
            }
        };
        self.push(shape, out, Op::Binary(kind, bc, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        self.push(t.shape().to_vec(), out, Op::Scale(a, c))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let t = self.value(a);
        if kind == UnaryKind::Sqrt {
            if let Some(i) = t.data().iter().position(|&x| x <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "sqrt of non-positive value at flat index {i}"
                )));
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Gelu => kernels::gelu,
            UnaryKind::Softplus => kernels::softplus,
        };
        let out = t.data().iter().map(|&x| f(x)).collect();
        self.push(t.shape().to_vec(), out, Op::Unary(kind, a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(vec![], vec![s], Op::Mean(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            kernels::softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        self.push(vec![m, n], out, Op::SoftmaxRows(a))
    }

    fn row_vector_len(&self, b: Var) -> usize {
        self.value(b).numel()
    }

    /// `x[L×d] + b` with `b` a length-`d` vector added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.row_vector_len(b) != n {
            return Err(self.shape_err("add_row", x, b));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        self.push(vec![m, n], out, Op::AddRow(x, b))
    }

    /// `x[L×d] ⊙ g` with `g` a length-`d` vector multiplied into every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.row_vector_len(g) != n {
            return Err(self.shape_err("mul_row", x, g));
        }
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(gv).for_each(|(o, g)| *o *= g);
        }
        self.push(vec![m, n], out, Op::MulRow(x, g))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * is);
            inv_std.push(is);
        }
        self.push(vec![m, n], out, Op::LayerNormRows { x, inv_std })
    }

    /// Scales every row to unit ℓ2 norm. A row with norm at or below
    /// [`MIN_FEATURE_NORM`] is a [`Error::DegenerateFeature`].
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in out.chunks_mut(n).enumerate() {
            let norm = kernels::dot(row, row).sqrt();
            if norm <= MIN_FEATURE_NORM {
                return Err(Error::DegenerateFeature { index: i });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(vec![m, n], out, Op::NormalizeRows { x, norms })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        self.push(vec![rows.len(), n], out, Op::GatherRows(x, rows.to_vec()))
    }

    /// Copy of `base` with each listed row overwritten by the vector `token`.
    pub fn replace_rows(&mut self, base: Var, token: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(base)?;
        if self.row_vector_len(token) != n {
            return Err(self.shape_err("replace_rows", base, token));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let tok = self.value(token).data().to_vec();
        let mut out = self.value(base).data().to_vec();
        for &r in rows {
            out[r * n..(r + 1) * n].copy_from_slice(&tok);
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let op = Op::ReplaceRows { base, token, rows };
        self.push(vec![m, n], out, op)
    }

    /// Stacks `a[m×d]` on top of `b[p×d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2(a)?;
        let (mb, nb) = self.dims2(b)?;
        if na != nb {
            return Err(self.shape_err("concat_rows", a, b));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.push(vec![ma + mb, na], out, Op::ConcatRows(a, b))
    }

    /// Mean over the columns of each row, giving an `L×1` column.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        self.push(vec![m, 1], out, Op::RowMean(x))
    }

    /// Elementwise Smooth-ℓ1 of a residual: `0.5 e²/β` for `|e| < β`, else `|e| - 0.5β`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::InvalidArgument(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&e| {
                if e.abs() < beta {
                    0.5 * e * e / beta
                } else {
                    e.abs() - 0.5 * beta
                }
            })
            .collect();
        self.push(t.shape().to_vec(), out, Op::SmoothL1 { x, beta })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = t.data().to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits)?;
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= n) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &c) in probs.chunks_mut(n).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
            kernels::softmax_in_place(row);
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(vec![], vec![total / m as f64], op)
    }

    /// Gated outer-product recurrence over already-projected sequences:
    /// `S_t = exp(-softplus(δ_t)·α) S_{t-1} + v_t k_tᵀ`, `y_t = S_t q_t`, `S_0 = 0`.
    ///
    /// `q, k, v` are `L×d`, `delta` is `L×1` and `alpha` a scalar. Every
    /// intermediate state is kept for the backward pass.
    pub fn gated_scan(&mut self, q: Var, k: Var, v: Var, delta: Var, alpha: Var) -> Result<Var> {
        let (l, d) = self.dims2(q)?;
        if self.shape(k) != [l, d] {
            return Err(self.shape_err("mamba2_scan", q, k));
        }
        if self.shape(v) != [l, d] {
            return Err(self.shape_err("mamba2_scan", q, v));
        }
        if self.value(delta).numel() != l {
            return Err(self.shape_err("mamba2_scan", q, delta));
        }
        if !self.value(alpha).is_scalar() {
            return Err(self.shape_err("mamba2_scan", q, alpha));
        }
        let a = self.value(alpha).item();
        let (qd, kd, vd, dd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(delta).data(),
        );
        let mut states = vec![0.0; l * d * d];
        let mut decay = Vec::with_capacity(l);
        let mut out = vec![0.0; l * d];
        let mut prev = vec![0.0; d * d];
        for t in 0..l {
            let g = (-kernels::softplus(dd[t]) * a).exp();
            decay.push(g);
            let (qt, kt, vt) = (
                &qd[t * d..(t + 1) * d],
                &kd[t * d..(t + 1) * d],
                &vd[t * d..(t + 1) * d],
            );
            let st = &mut states[t * d * d..(t + 1) * d * d];
            for i in 0..d {
                let vi = vt[i];
                let srow = &mut st[i * d..(i + 1) * d];
                let prow = &prev[i * d..(i + 1) * d];
                for j in 0..d {
                    srow[j] = g * prow[j] + vi * kt[j];
                }
                out[t * d + i] = kernels::dot(srow, qt);
            }
            prev.copy_from_slice(st);
        }
        let saved = ScanSaved {
            q,
            k,
            v,
            delta,
            alpha,
            decay,
            states,
        };
        self.push(vec![l, d], out, Op::Scan(saved))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// leaf that requires them; calling twice without
    /// [`Graph::zero_grad`] adds the second pass on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarBackward(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&gy);
                continue;
            }
            for (input, g) in self.vjp(id, &gy) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Vector-Jacobian products of node `id` for its inputs.
    fn vjp(&self, id: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, kernels::matmul_bt(gy, val(*b), m, n, k)));
                }
                if want(*b) {
                    out.push((*b, kernels::matmul_at(val(*a), gy, m, k, n)));
                }
                out
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                vec![(*a, kernels::transpose(gy, c, r))]
            }
            Op::Binary(kind, bc, a, b) => {
                let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (gy.to_vec(), gy.to_vec()),
                    BinaryKind::Sub => (gy.to_vec(), gy.iter().map(|g| -g).collect()),
                    BinaryKind::Mul => {
                        let (va, vb) = (val(*a), val(*b));
                        let at = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
                        (
                            gy.iter().enumerate().map(|(i, g)| g * at(vb, i)).collect(),
                            gy.iter().enumerate().map(|(i, g)| g * at(va, i)).collect(),
                        )
                    }
                };
                let reduce = |v: Vec<f64>| vec![v.iter().sum::<f64>()];
                match bc {
                    Broadcast::None => vec![(*a, da), (*b, db)],
                    Broadcast::Lhs => vec![(*a, reduce(da)), (*b, db)],
                    Broadcast::Rhs => vec![(*a, da), (*b, reduce(db))],
                }
            }
            Op::Scale(a, c) => vec![(*a, gy.iter().map(|g| g * c).collect())],
            Op::Unary(kind, a) => {
                let x = val(*a);
                let g: Vec<f64> = match kind {
                    UnaryKind::Exp => gy.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryKind::Sqrt => gy.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect(),
                    UnaryKind::Gelu => gy
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect(),
                    UnaryKind::Softplus => gy
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| g * kernels::sigmoid(x))
                        .collect(),
                };
                vec![(*a, g)]
            }
            Op::Sum(a) => vec![(*a, vec![gy[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![gy[0] / n as f64; n])]
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dyr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                    let s = kernels::dot(yr, dyr);
                    for j in 0..n {
                        gr[j] = yr[j] * (dyr[j] - s);
                    }
                }
                vec![(*a, g)]
            }
            Op::AddRow(x, b) => {
                let n = node.value.shape()[1];
                let mut gb = vec![0.0; n];
                for r in gy.chunks(n) {
                    gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                vec![(*x, gy.to_vec()), (*b, gb)]
            }
            Op::MulRow(x, gain) => {
                let n = node.value.shape()[1];
                let (xv, gv) = (val(*x), val(*gain));
                let mut dx = gy.to_vec();
                let mut dg = vec![0.0; n];
                for (i, r) in dx.chunks_mut(n).enumerate() {
                    for j in 0..n {
                        dg[j] += r[j] * xv[i * n + j];
                        r[j] *= gv[j];
                    }
                }
                vec![(*x, dx), (*gain, dg)]
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (i, ((dr, yr), gr)) in dx
                    .chunks_mut(n)
                    .zip(y.chunks(n))
                    .zip(gy.chunks(n))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = kernels::dot(gr, yr) / n as f64;
                    for j in 0..n {
                        dr[j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![(*x, dx)]
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (i, ((dr, yr), gr)) in dx
                    .chunks_mut(n)
                    .zip(y.chunks(n))
                    .zip(gy.chunks(n))
                    .enumerate()
                {
                    let s = kernels::dot(yr, gr);
                    for j in 0..n {
                        dr[j] = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::GatherRows(x, rows) => {
                let n = node.value.shape()[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += gy[k * n + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::ReplaceRows { base, token, rows } => {
                let n = node.value.shape()[1];
                let mut db = gy.to_vec();
                let mut dt = vec![0.0; n];
                for &r in rows {
                    for j in 0..n {
                        dt[j] += gy[r * n + j];
                    }
                }
                for &r in rows {
                    db[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                }
                vec![(*base, db), (*token, dt)]
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                vec![(*a, gy[..split].to_vec()), (*b, gy[split..].to_vec())]
            }
            Op::RowMean(x) => {
                let n = self.nodes[x.0].value.shape()[1];
                let dx = gy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / n as f64, n))
                    .collect();
                vec![(*x, dx)]
            }
            Op::SmoothL1 { x, beta } => {
                let dx = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &e)| {
                        if e.abs() < *beta {
                            g * e / beta
                        } else {
                            g * e.signum()
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = probs.len() / labels.len();
                let scale = gy[0] / labels.len() as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &c) in labels.iter().enumerate() {
                    g[i * n + c] -= scale;
                }
                vec![(*logits, g)]
            }
            Op::Scan(s) => self.scan_vjp(s, gy),
        }
    }

    fn scan_vjp(&self, s: &ScanSaved, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let (l, d) = self.nodes[s.q.0].value.dims2().unwrap();
        let (qd, kd, vd, dd) = (val(s.q), val(s.k), val(s.v), val(s.delta));
        let alpha = val(s.alpha)[0];
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut ddelta = vec![0.0; l];
        let mut dalpha = 0.0;
        // Gradient w.r.t. S_t flowing back from later tokens.
        let mut ds = vec![0.0; d * d];
        for t in (0..l).rev() {
            let (qt, kt, vt) = (
                &qd[t * d..(t + 1) * d],
                &kd[t * d..(t + 1) * d],
                &vd[t * d..(t + 1) * d],
            );
            let gyt = &gy[t * d..(t + 1) * d];
            let st = &s.states[t * d * d..(t + 1) * d * d];
            // y_t = S_t q_t
            for i in 0..d {
                let row = &mut ds[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] += gyt[i] * qt[j];
                }
            }
            let dqt = &mut dq[t * d..(t + 1) * d];
            for i in 0..d {
                let srow = &st[i * d..(i + 1) * d];
                for j in 0..d {
                    dqt[j] += srow[j] * gyt[i];
                }
            }
            // S_t = g_t S_{t-1} + v_t k_tᵀ
            let dvt = &mut dv[t * d..(t + 1) * d];
            for i in 0..d {
                dvt[i] = kernels::dot(&ds[i * d..(i + 1) * d], kt);
            }
            let dkt = &mut dk[t * d..(t + 1) * d];
            for i in 0..d {
                let row = &ds[i * d..(i + 1) * d];
                for j in 0..d {
                    dkt[j] += row[j] * vt[i];
                }
            }
            let g = s.decay[t];
            if t > 0 {
                let prev = &s.states[(t - 1) * d * d..t * d * d];
                let dg = kernels::dot(&ds, prev);
                // g = exp(-softplus(δ) α)
                ddelta[t] = -dg * g * alpha * kernels::sigmoid(dd[t]);
                dalpha += -dg * g * kernels::softplus(dd[t]);
            }
            ds.iter_mut().for_each(|v| *v *= g);
        }
        vec![
            (s.q, dq),
            (s.k, dk),
            (s.v, dv),
            (s.delta, ddelta),
            (s.alpha, vec![dalpha]),
        ]
    }
}
