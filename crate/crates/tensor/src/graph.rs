//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records its inputs on the tape, so node
//! ids are already in topological order. [`Graph::backward`] walks the tape
//! in reverse and returns one gradient per parameter of the attached
//! [`ParamStore`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRow(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Relu(NodeId),
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        smoothing: T,
        scale: T,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Tape of evaluated nodes. Parameters are borrowed read-only from the
/// store for the lifetime of the graph.
#[derive(Debug)]
pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    inputs: BTreeMap<String, NodeId>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter; zeros when the loss does not reach it.
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    /// Gradient for any node that required one.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }
}

/// `c (+)= op(a) * op(b)` for row-major storage. With `a_t`, `a` is stored
/// as `[k, m]`; with `b_t`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    /// A graph without parameters.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> Option<&'s ParamStore<T>> {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.expect("param node without store").get(*p),
            _ => unreachable!("node {} has no value", id.0),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.is_finite() || !self.inputs_finite(&op),
            "non-finite output from {}",
            op.name()
        );
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op<T>) -> bool {
        let ids: Vec<NodeId> = match op {
            Op::Leaf | Op::Param(_) => return true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sum(x) => vec![*x],
            Op::Softmax { x } | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(v) => v.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        };
        ids.iter().all(|&i| self.value(i).is_finite())
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Binds a named input leaf.
    pub fn input(&mut self, name: impl Into<String>, t: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = self.push(Op::Leaf, t, requires_grad);
        self.inputs.insert(name.into(), id);
        id
    }

    pub fn named(&self, name: &str) -> Result<NodeId> {
        self.inputs
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnboundInput(name.to_string()))
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Ok(n);
        }
        let store = self.store.ok_or(TensorError::NoStore)?;
        if id.0 >= store.len() {
            return Err(TensorError::UnknownParam(format!("#{}", id.0)));
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: store.is_trainable(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        Ok(n)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<NodeId> {
        let store = self.store.ok_or(TensorError::NoStore)?;
        let id = store.id(name)?;
        self.param(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(op, format!("operands {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let Some((m, n)) = va.dims2() else {
            return Err(self.shape_err("add_row", format!("lhs {:?} is not a matrix", va.shape())));
        };
        if vb.numel() != n {
            return Err(self.shape_err(
                "add_row",
                format!("row vector {:?} does not match {n} columns", vb.shape()),
            ));
        }
        let mut data = va.data().to_vec();
        let bias = vb.data();
        for r in 0..m {
            for (x, &y) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *x += y;
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddRow(a, b), Tensor::from_parts(shape, data), rg))
    }

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((br, bc))) = (va.dims2(), vb.dims2()) else {
            return Err(self.shape_err(
                "matmul",
                format!("operands {:?} and {:?} must be matrices", va.shape(), vb.shape()),
            ));
        };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.shape_err(
                "matmul",
                format!(
                    "inner extents differ: {:?} x {:?}{}",
                    va.shape(),
                    vb.shape(),
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul { a, b, trans_b },
            Tensor::from_parts(vec![m, n], out),
            rg,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    /// Row-wise softmax. With `causal`, row `i` of an `[m, n]` input only
    /// sees columns `j <= i + (n - m)`.
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((m, n)) = vx.dims2() else {
            return Err(self.shape_err("softmax", format!("input {:?} is not a matrix", vx.shape())));
        };
        if causal && m > n {
            return Err(self.shape_err(
                "softmax",
                format!("causal mask needs rows <= cols, got {m}x{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let visible = if causal { r + 1 + (n - m) } else { n };
            let row = &vx.data()[r * n..r * n + visible];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * n..r * n + visible];
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(row) {
                *d = (s - max).exp();
                total += *d;
            }
            let inv = T::one() / total;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax { x }, Tensor::from_parts(shape, out), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// per-column gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((m, n)) = vx.dims2() else {
            return Err(self.shape_err("layer_norm", format!("input {:?} is not a matrix", vx.shape())));
        };
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return Err(self.shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} do not match {n} columns", g.shape(), b.shape()),
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_n = T::one() / T::lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no operands".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            match v.dims2() {
                Some((r, c)) if r == rows => widths.push(c),
                _ => {
                    return Err(self.shape_err(
                        "concat_cols",
                        format!("operand {:?} does not have {rows} rows", v.shape()),
                    ))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![rows, total], out),
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let Some((m, n)) = vx.dims2() else {
            return Err(self.shape_err("slice_cols", format!("input {:?} is not a matrix", vx.shape())));
        };
        if len == 0 || start + len > n {
            return Err(self.shape_err(
                "slice_cols",
                format!("columns {start}..{} out of range for width {n}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&vx.data()[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::SliceCols { x, start },
            Tensor::from_parts(vec![m, len], out),
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let Some((v, d)) = vt.dims2() else {
            return Err(self.shape_err("gather", format!("table {:?} is not a matrix", vt.shape())));
        };
        if ids.is_empty() {
            return Err(self.shape_err("gather", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(self.shape_err("gather", format!("row {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    /// Label-smoothed cross-entropy summed over rows that carry a target,
    /// multiplied by `scale`. The smoothed distribution puts
    /// `1 - smoothing + smoothing / V` on the target and `smoothing / V`
    /// elsewhere.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        smoothing: f64,
        scale: f64,
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let Some((m, v)) = vl.dims2() else {
            return Err(self.shape_err("cross_entropy", format!("logits {:?} are not a matrix", vl.shape())));
        };
        if targets.len() != m {
            return Err(self.shape_err(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(self.shape_err("cross_entropy", format!("target {bad} >= vocabulary {v}")));
        }
        let eps = T::lit(smoothing);
        let off = eps / T::lit(v as f64);
        let on = T::one() - eps + off;
        let mut probs = vec![T::zero(); m * v];
        let mut loss = T::zero();
        for r in 0..m {
            let Some(tgt) = targets[r] else { continue };
            let row = &vl.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            let p = &mut probs[r * v..(r + 1) * v];
            let mut row_loss = T::zero();
            for j in 0..v {
                let logp = row[j] - lse;
                p[j] = logp.exp();
                let q = if j == tgt { on } else { off };
                row_loss -= q * logp;
            }
            loss += row_loss;
        }
        let scale = T::lit(scale);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                scale,
                probs,
            },
            Tensor::scalar(loss * scale),
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(NodeId(idx), &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = match self.store {
            Some(store) => store
                .ids()
                .map(|pid| {
                    self.param_nodes
                        .get(&pid)
                        .and_then(|n| grads[n.0].clone())
                        .filter(|_| store.is_trainable(pid))
                        .unwrap_or_else(|| Tensor::zeros(store.get(pid).shape().to_vec()))
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: NodeId) -> Option<&'g mut [T]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, id: NodeId, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[id.0].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for (n, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(d) = self.acc(grads, n) {
                        d.iter_mut().zip(gd).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (n, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(d) = self.acc(grads, n) {
                        d.iter_mut().zip(gd).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * vb[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x += *c * y);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                }
                let n = self.value(*b).numel();
                if let Some(d) = self.acc(grads, *b) {
                    for row in gd.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2().expect("matrix");
                let n = g.cols();
                if let Some(d) = self.acc(grads, *a) {
                    // dA = dC op(B)^T
                    gemm(m, n, k, gd, false, vb.data(), !*trans_b, d, true);
                }
                if let Some(d) = self.acc(grads, *b) {
                    if *trans_b {
                        // B is [n, k]: dB = dC^T A
                        gemm(n, m, k, gd, true, va.data(), false, d, true);
                    } else {
                        // B is [k, n]: dB = A^T dC
                        gemm(k, m, n, va.data(), true, gd, false, d, true);
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        if va[i] > T::zero() {
                            d[i] += gd[i];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = self.value(id);
                let n = y.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks_exact(n)
                        .zip(gd.chunks_exact(n))
                        .zip(d.chunks_exact_mut(n))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let inv_n = T::one() / T::lit(n as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        let dr = &mut d[r * n..(r + 1) * n];
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            dr[c] += rs * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *gain) {
                    for (gr, hr) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            d[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for gr in gd.chunks_exact(n) {
                        d.iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for r in 0..rows {
                            let src = &gd[r * total + off..r * total + off + w];
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = g.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, src) in gd.chunks_exact(w).enumerate() {
                        d[r * n + start..r * n + start + w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dcols = g.cols();
                if let Some(d) = self.acc(grads, *table) {
                    for (src, &i) in gd.chunks_exact(dcols).zip(ids) {
                        d[i * dcols..(i + 1) * dcols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                scale,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let coef = gd[0] * *scale;
                let off = *smoothing / T::lit(v as f64);
                let on = T::one() - *smoothing + off;
                if let Some(d) = self.acc(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = &probs[r * v..(r + 1) * v];
                        let dr = &mut d[r * v..(r + 1) * v];
                        for j in 0..v {
                            let q = if j == t { on } else { off };
                            dr[j] += coef * (p[j] - q);
                        }
                    }
                }
            }
        }
    }
}

/// Runs `build` on a fresh graph with `inputs` bound by name and returns
/// the values of the nodes it names as outputs.
pub fn forward<T, F>(
    store: &ParamStore<T>,
    inputs: &BTreeMap<String, Tensor<T>>,
    build: F,
) -> Result<BTreeMap<String, Tensor<T>>>
where
    T: Scalar,
    F: FnOnce(&mut Graph<'_, T>) -> Result<Vec<(String, NodeId)>>,
{
    let mut g = Graph::new(store);
    for (name, t) in inputs {
        g.input(name.clone(), t.clone(), false);
    }
    let outs = build(&mut g)?;
    Ok(outs
        .into_iter()
        .map(|(name, id)| (name, g.value(id).clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_graph() {
        let store = ParamStore::<f64>::new();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), t(&[2], &[1.0, 2.0]));
        let out = forward(&store, &inputs, |g| Ok(vec![("y".into(), g.named("x")?)])).unwrap();
        assert_eq!(out["y"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn unbound_input_is_reported() {
        let store = ParamStore::<f64>::new();
        let err = forward(&store, &BTreeMap::new(), |g| Ok(vec![("y".into(), g.named("x")?)]))
            .unwrap_err();
        assert!(matches!(err, TensorError::UnboundInput(ref n) if n == "x"));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_transposed_matches_explicit() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[2, 3], &[1.0, 0.0, -1.0, 2.0, 1.0, 0.0]));
        let c = g.matmul_t(a, b, true).unwrap();
        assert_eq!(g.value(c).data(), &[-2.0, 4.0, -2.0, 13.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_node() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 2], &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            TensorError::Shape { node, op, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::detached();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax(x, false).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::detached();
        let x = g.constant(t(&[2, 2], &[5.0, 7.0, 1.0, 1.0]));
        let y = g.softmax(x, true).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::detached();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::detached();
        let x = g.variable(t(&[1], &[2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::detached();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unreached_and_frozen_params_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0]), true);
        let unused = store.add("unused", t(&[3], &[1.0, 2.0, 3.0]), true);
        let frozen = store.add("frozen", t(&[2], &[1.0, 1.0]), false);
        let mut g = Graph::new(&store);
        let u = g.param(used).unwrap();
        let f = g.param(frozen).unwrap();
        let p = g.mul(u, f).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(used).data(), &[1.0, 1.0]);
        assert_eq!(grads.param(unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.param(frozen).shape(), &[2]);
        assert_eq!(grads.param(frozen).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_without_smoothing_is_negative_log_likelihood() {
        let mut g = Graph::<f64>::detached();
        let z = g.variable(t(&[1, 2], &[0.0, 0.0]));
        let l = g.cross_entropy(z, &[Some(1)], 0.0, 1.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let d = grads.wrt(z).unwrap().data();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut g = Graph::<f64>::detached();
        let z = g.variable(t(&[2, 2], &[3.0, -1.0, 0.0, 0.0]));
        let l = g.cross_entropy(z, &[None, Some(0)], 0.1, 1.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(&grads.wrt(z).unwrap().data()[..2], &[0.0, 0.0]);
    }
}
