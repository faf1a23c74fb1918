//! Static expression graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once as a list of op records in topological order,
//! then evaluated against [`Bindings`] that supply every leaf tensor. The
//! forward pass caches all intermediate values; [`Graph::backward`] replays
//! them in reverse to produce a gradient for every leaf declared with
//! `requires_grad`.

use std::collections::HashMap;

use crate::tensor::{numel, Result, Tensor, TensorError};

const LAYERNORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One op record. Inputs always refer to earlier nodes.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: String, requires_grad: bool },
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul(NodeId, NodeId),
    /// `[m, k] x [n, k]^T -> [m, n]` without materializing the transpose.
    MatMulT(NodeId, NodeId),
    /// Elementwise with numpy-style broadcasting.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// 2-D transpose.
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    /// Sum over one axis (removed), or over everything when `axis` is `None`.
    Sum {
        input: NodeId,
        axis: Option<usize>,
    },
    Mean {
        input: NodeId,
        axis: Option<usize>,
    },
    /// Softmax over the last axis.
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Mean absolute difference (scalar).
    L1(NodeId, NodeId),
    /// Mean squared difference (scalar).
    Mse(NodeId, NodeId),
    /// Row-wise cosine similarity matrix `[n, d] x [m, d] -> [n, m]`.
    CosineSimilarity(NodeId, NodeId),
    /// `-mean_i sum_j q_ij log softmax(z_i)_j` (scalar).
    SoftCrossEntropy { logits: NodeId, targets: NodeId },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::LayerNorm { .. } => "layernorm",
            Op::L1(..) => "l1",
            Op::Mse(..) => "mse",
            Op::CosineSimilarity(..) => "cosine_similarity",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::L1(a, b)
            | Op::Mse(a, b)
            | Op::CosineSimilarity(a, b) => vec![*a, *b],
            Op::SoftCrossEntropy { logits, targets } => vec![*logits, *targets],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x, _)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Gelu(x)
            | Op::Silu(x) => vec![*x],
            Op::Slice { input, .. } | Op::Sum { input, .. } | Op::Mean { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { input, gamma, beta } => vec![*input, *gamma, *beta],
        }
    }
}

/// Leaf values for one evaluation. Tensors are borrowed, so parameters are
/// never copied into a graph.
#[derive(Clone, Default)]
pub struct Bindings<'a> {
    map: HashMap<NodeId, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, id: NodeId, value: &'a Tensor) -> &mut Self {
        self.map.insert(id, value);
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&'a Tensor> {
        self.map.get(&id).copied()
    }
}

/// Gradients keyed by leaf id.
pub type Gradients = HashMap<NodeId, Tensor>;

#[derive(Default)]
pub struct Graph {
    ops: Vec<Op>,
    leaves: HashMap<String, NodeId>,
    output: Option<NodeId>,
    cache: Option<Vec<Option<Tensor>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.ops.len()));
        self.ops.push(op);
        self.cache = None;
        NodeId(self.ops.len() - 1)
    }

    /// Declares (or returns the existing) leaf with this name.
    pub fn leaf(&mut self, name: &str, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf {
            name: name.to_string(),
            requires_grad,
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Leaves in declaration order as `(name, id, requires_grad)`.
    pub fn leaves(&self) -> Vec<(&str, NodeId, bool)> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Leaf {
                    name,
                    requires_grad,
                } => Some((name.as_str(), NodeId(i), *requires_grad)),
                _ => None,
            })
            .collect()
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Marks the node returned by [`Graph::forward`]. Defaults to the last node.
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.ops.len().checked_sub(1).map(NodeId))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    /// `a b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(x, s))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }
    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push(Op::Reshape(x, shape.into()))
    }
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice {
            input,
            axis,
            start,
            len,
        })
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }
    pub fn sum(&mut self, input: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Sum { input, axis })
    }
    pub fn mean(&mut self, input: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Mean { input, axis })
    }
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Silu(x))
    }
    pub fn layernorm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm { input, gamma, beta })
    }
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::L1(a, b))
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mse(a, b))
    }
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::CosineSimilarity(a, b))
    }
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftCrossEntropy { logits, targets })
    }

    /// `x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul_t(x, w);
        self.add(y, b)
    }

    /// Evaluates every node and returns the output value.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<Tensor> {
        let out = self
            .output()
            .ok_or_else(|| TensorError::UnboundLeaf("<empty graph>".into()))?;
        let mut vals: Vec<Option<Tensor>> = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let v = match op {
                Op::Leaf { name, .. } => {
                    let id = NodeId(vals.len());
                    if bindings.get(id).is_none() {
                        return Err(TensorError::UnboundLeaf(name.clone()));
                    }
                    None
                }
                _ => {
                    let get = |id: NodeId| value_of(&vals, bindings, id);
                    let t = eval(op, &get)?;
                    if !t.all_finite() {
                        return Err(TensorError::NonFinite(op.kind().into()));
                    }
                    Some(t)
                }
            };
            vals.push(v);
        }
        let result = value_of(&vals, bindings, out).clone();
        self.cache = Some(vals);
        Ok(result)
    }

    /// Cached value of any node after [`Graph::forward`].
    pub fn value<'a>(&'a self, id: NodeId, bindings: &Bindings<'a>) -> Option<&'a Tensor> {
        let cache = self.cache.as_ref()?;
        match &cache[id.0] {
            Some(t) => Some(t),
            None => bindings.get(id),
        }
    }

    /// Propagates `upstream` (shaped like the output) back to every leaf that
    /// requires a gradient.
    pub fn backward(&self, bindings: &Bindings, upstream: &Tensor) -> Result<Gradients> {
        let vals = self
            .cache
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward)?;
        let out = self.output().ok_or(TensorError::BackwardBeforeForward)?;
        let get = |id: NodeId| value_of(vals, bindings, id);
        let out_shape = get(out).shape();
        if out_shape != upstream.shape() && numel(out_shape) != upstream.len() {
            return Err(TensorError::UpstreamShape {
                expected: out_shape.to_vec(),
                got: upstream.shape().to_vec(),
            });
        }

        let needs = self.needs_grad();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        grads[out.0] = Some(upstream.data().to_vec());
        for i in (0..=out.0).rev() {
            let op = &self.ops[i];
            if matches!(op, Op::Leaf { .. }) || !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(op, &g, get(NodeId(i)), &get, &needs, &mut grads);
        }

        let mut result = Gradients::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf {
                requires_grad: true,
                ..
            } = op
            {
                let shape = get(NodeId(i)).shape().to_vec();
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; numel(&shape)]);
                result.insert(NodeId(i), Tensor::from_parts(shape, data));
            }
        }
        Ok(result)
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            needs[i] = match op {
                Op::Leaf { requires_grad, .. } => *requires_grad,
                _ => op.inputs().iter().any(|j| needs[j.0]),
            };
        }
        needs
    }
}

fn value_of<'a>(vals: &'a [Option<Tensor>], bindings: &Bindings<'a>, id: NodeId) -> &'a Tensor {
    match &vals[id.0] {
        Some(t) => t,
        None => bindings.get(id).expect("leaf bound during forward"),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `c = alpha * a b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: all slices cover the strided extents implied by m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index map for a broadcast binary op.
enum Broadcast {
    Same,
    /// rhs repeats with period `n`.
    RhsSuffix(usize),
    /// lhs repeats with period `n`.
    LhsSuffix(usize),
    General(Vec<(usize, usize)>),
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if b.len() <= a.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Broadcast::RhsSuffix(numel(b))));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Broadcast::LhsSuffix(numel(a))));
    }
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; nd];
        let mut acc = 1;
        for d in (0..nd).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total = numel(&out);
    let mut idx = vec![0usize; nd];
    let mut pairs = Vec::with_capacity(total);
    for _ in 0..total {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((ia, ib));
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, Broadcast::General(pairs)))
}

impl Broadcast {
    fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Broadcast::Same => (0..n).for_each(|o| f(o, o, o)),
            Broadcast::RhsSuffix(p) => (0..n).for_each(|o| f(o, o, o % p)),
            Broadcast::LhsSuffix(p) => (0..n).for_each(|o| f(o, o % p, o)),
            Broadcast::General(pairs) => pairs
                .iter()
                .enumerate()
                .for_each(|(o, &(ia, ib))| f(o, ia, ib)),
        }
    }
}

/// Splits a shape around `axis` into `(outer, dim, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn last_axis(t: &Tensor) -> (usize, usize) {
    let d = t.shape().last().copied().unwrap_or(1);
    (t.len() / d, d)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn normalized_rows(t: &Tensor, norms: &[f64]) -> Vec<f64> {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for (i, &n) in norms.iter().enumerate() {
        let n = n.max(NORM_EPS);
        out.extend(t.data()[i * c..(i + 1) * c].iter().map(|v| v / n));
    }
    out
}

fn log_softmax_rows(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for i in 0..rows {
        let r = &z[i * cols..(i + 1) * cols];
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..cols {
            out[i * cols + j] = r[j] - lse;
        }
    }
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn eval<'a>(op: &Op, get: &impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves are read from bindings"),
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (m, k) = matrix_dims("matmul", a)?;
            let (k2, n) = matrix_dims("matmul", b)?;
            if k != k2 {
                return Err(mismatch("matmul", a, b));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut c);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::MatMulT(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (m, k) = matrix_dims("matmul_t", a)?;
            let (n, k2) = matrix_dims("matmul_t", b)?;
            if k != k2 {
                return Err(mismatch("matmul_t", a, b));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), 0.0, &mut c);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let is_add = matches!(op, Op::Add(..));
            let (a, b) = (get(*a), get(*b));
            let (shape, bc) = broadcast(op.kind(), a.shape(), b.shape())?;
            let n = numel(&shape);
            let mut out = vec![0.0; n];
            let (da, db) = (a.data(), b.data());
            bc.for_each(n, |o, ia, ib| {
                out[o] = if is_add { da[ia] + db[ib] } else { da[ia] * db[ib] }
            });
            Tensor::from_parts(shape, out)
        }
        Op::Scale(x, s) => map(get(*x), |v| v * s),
        Op::Transpose(x) => {
            let x = get(*x);
            let (r, c) = matrix_dims("transpose", x)?;
            let d = x.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        }
        Op::Reshape(x, shape) => get(*x).clone().reshaped(shape.clone())?,
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let x = get(*input);
            let (outer, dim, inner) = split_axis(x.shape(), *axis)?;
            if *len == 0 || start + len > dim {
                return Err(TensorError::ShapeMismatch {
                    op: "slice",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Op::Concat { inputs, axis } => {
            let parts: Vec<&Tensor> = inputs.iter().map(|i| get(*i)).collect();
            let first = parts[0];
            let (outer, _, inner) = split_axis(first.shape(), *axis)?;
            let mut total = 0;
            for p in &parts {
                let s = p.shape();
                let ok = s.len() == first.ndim()
                    && s[..*axis] == first.shape()[..*axis]
                    && s[axis + 1..] == first.shape()[axis + 1..];
                if !ok {
                    return Err(mismatch("concat", first, p));
                }
                total += s[*axis];
            }
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in &parts {
                    let chunk = p.shape()[*axis] * inner;
                    out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, out)
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let x = get(*input);
            let is_mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    Tensor::scalar(if is_mean { s / x.len() as f64 } else { s })
                }
                Some(ax) => {
                    let (outer, dim, inner) = split_axis(x.shape(), *ax)?;
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for d in 0..dim {
                            let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    if is_mean {
                        out.iter_mut().for_each(|v| *v /= dim as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*ax);
                    Tensor::from_parts(shape, out)
                }
            }
        }
        Op::Softmax(x) => {
            let x = get(*x);
            let (rows, cols) = last_axis(x);
            let ls = log_softmax_rows(x.data(), rows, cols);
            Tensor::from_parts(x.shape().to_vec(), ls.into_iter().map(f64::exp).collect())
        }
        Op::Log(x) => {
            let x = get(*x);
            if x.data().iter().any(|&v| v <= 0.0) {
                return Err(TensorError::NonFinite("log".into()));
            }
            map(x, f64::ln)
        }
        Op::Exp(x) => map(get(*x), f64::exp),
        Op::Gelu(x) => map(get(*x), gelu),
        Op::Silu(x) => map(get(*x), |v| v * sigmoid(v)),
        Op::LayerNorm { input, gamma, beta } => {
            let (x, g, b) = (get(*input), get(*gamma), get(*beta));
            let (rows, d) = last_axis(x);
            if g.len() != d || b.len() != d {
                return Err(mismatch("layernorm", x, g));
            }
            let mut out = vec![0.0; x.len()];
            for i in 0..rows {
                let r = &x.data()[i * d..(i + 1) * d];
                let (mu, rstd) = moments(r);
                for j in 0..d {
                    out[i * d + j] = (r[j] - mu) * rstd * g.data()[j] + b.data()[j];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::L1(a, b) | Op::Mse(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.shape() != b.shape() {
                return Err(mismatch(op.kind(), a, b));
            }
            let l1 = matches!(op, Op::L1(..));
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if l1 { (x - y).abs() } else { (x - y) * (x - y) })
                .sum();
            Tensor::scalar(s / a.len() as f64)
        }
        Op::CosineSimilarity(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (n, d) = matrix_dims("cosine_similarity", a)?;
            let (m, d2) = matrix_dims("cosine_similarity", b)?;
            if d != d2 {
                return Err(mismatch("cosine_similarity", a, b));
            }
            let ah = normalized_rows(a, &row_norms(a));
            let bh = normalized_rows(b, &row_norms(b));
            let mut out = vec![0.0; n * m];
            gemm(n, d, m, &ah, (d, 1), &bh, (1, d), 0.0, &mut out);
            Tensor::from_parts(vec![n, m], out)
        }
        Op::SoftCrossEntropy { logits, targets } => {
            let (z, q) = (get(*logits), get(*targets));
            if z.shape() != q.shape() {
                return Err(mismatch("soft_cross_entropy", z, q));
            }
            let (rows, cols) = last_axis(z);
            let lp = log_softmax_rows(z.data(), rows, cols);
            let s: f64 = lp.iter().zip(q.data()).map(|(l, q)| q * l).sum();
            Tensor::scalar(-s / rows as f64)
        }
    })
}

/// Mean and reciprocal standard deviation of one layernorm row.
fn moments(r: &[f64]) -> (f64, f64) {
    let d = r.len() as f64;
    let mu = r.iter().sum::<f64>() / d;
    let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn backprop<'a>(
    op: &Op,
    g: &[f64],
    out: &Tensor,
    get: &impl Fn(NodeId) -> &'a Tensor,
    needs: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    let need = |id: &NodeId| needs[id.0];
    match op {
        Op::Leaf { .. } => {}
        Op::MatMul(ai, bi) => {
            let (a, b) = (get(*ai), get(*bi));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if need(ai) {
                let ga = acc(grads, *ai, m * k);
                gemm(m, n, k, g, (n, 1), b.data(), (1, n), 1.0, ga);
            }
            if need(bi) {
                let gb = acc(grads, *bi, k * n);
                gemm(k, m, n, a.data(), (1, k), g, (n, 1), 1.0, gb);
            }
        }
        Op::MatMulT(ai, bi) => {
            let (a, b) = (get(*ai), get(*bi));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            if need(ai) {
                let ga = acc(grads, *ai, m * k);
                gemm(m, n, k, g, (n, 1), b.data(), (k, 1), 1.0, ga);
            }
            if need(bi) {
                let gb = acc(grads, *bi, n * k);
                gemm(n, m, k, g, (1, n), a.data(), (k, 1), 1.0, gb);
            }
        }
        Op::Add(ai, bi) | Op::Mul(ai, bi) => {
            let is_add = matches!(op, Op::Add(..));
            let (a, b) = (get(*ai), get(*bi));
            let (shape, bc) = broadcast("", a.shape(), b.shape()).expect("checked in forward");
            let n = numel(&shape);
            if need(ai) {
                let ga = acc(grads, *ai, a.len());
                let bd = b.data();
                bc.for_each(n, |o, ia, ib| {
                    ga[ia] += if is_add { g[o] } else { g[o] * bd[ib] }
                });
            }
            if need(bi) {
                let gb = acc(grads, *bi, b.len());
                let ad = a.data();
                bc.for_each(n, |o, ia, ib| {
                    gb[ib] += if is_add { g[o] } else { g[o] * ad[ia] }
                });
            }
        }
        Op::Scale(x, s) => {
            let gx = acc(grads, *x, g.len());
            gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            let gx = acc(grads, *x, r * c);
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Reshape(x, _) => {
            let gx = acc(grads, *x, g.len());
            gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let x = get(*input);
            let (outer, dim, inner) = split_axis(x.shape(), *axis).expect("checked");
            let gx = acc(grads, *input, x.len());
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (d, v) in gx[base..base + len * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis).expect("checked");
            let mut offset = 0;
            for id in inputs {
                let p = get(*id);
                let w = p.shape()[*axis] * inner;
                if need(id) {
                    let gp = acc(grads, *id, p.len());
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..o * total * inner + offset + w];
                        for (d, v) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let x = get(*input);
            let is_mean = matches!(op, Op::Mean { .. });
            let gx = acc(grads, *input, x.len());
            match axis {
                None => {
                    let v = if is_mean { g[0] / x.len() as f64 } else { g[0] };
                    gx.iter_mut().for_each(|d| *d += v);
                }
                Some(ax) => {
                    let (outer, dim, inner) = split_axis(x.shape(), *ax).expect("checked");
                    let f = if is_mean { 1.0 / dim as f64 } else { 1.0 };
                    for o in 0..outer {
                        for d in 0..dim {
                            let dst = &mut gx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (t, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *t += v * f;
                            }
                        }
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let (rows, cols) = last_axis(out);
            let y = out.data();
            let gx = acc(grads, *x, y.len());
            for i in 0..rows {
                let r = i * cols..(i + 1) * cols;
                let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                for j in r {
                    gx[j] += y[j] * (g[j] - dot);
                }
            }
        }
        Op::Log(x) => {
            let xv = get(*x).data();
            let gx = acc(grads, *x, xv.len());
            for j in 0..xv.len() {
                gx[j] += g[j] / xv[j];
            }
        }
        Op::Exp(x) => {
            let gx = acc(grads, *x, g.len());
            for (j, y) in out.data().iter().enumerate() {
                gx[j] += g[j] * y;
            }
        }
        Op::Gelu(x) | Op::Silu(x) => {
            let xv = get(*x).data();
            let is_gelu = matches!(op, Op::Gelu(..));
            let gx = acc(grads, *x, xv.len());
            for j in 0..xv.len() {
                let v = xv[j];
                let d = if is_gelu {
                    gelu_grad(v)
                } else {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                };
                gx[j] += g[j] * d;
            }
        }
        Op::LayerNorm { input, gamma, beta } => {
            let (x, gm) = (get(*input), get(*gamma));
            let (rows, d) = last_axis(x);
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; x.len()];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for i in 0..rows {
                let r = &x.data()[i * d..(i + 1) * d];
                let gr = &g[i * d..(i + 1) * d];
                let (mu, rstd) = moments(r);
                for j in 0..d {
                    xhat[j] = (r[j] - mu) * rstd;
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    dxhat[j] = gr[j] * gm.data()[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[i * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            for (id, part) in [(input, dx), (gamma, dgamma), (beta, dbeta)] {
                if need(id) {
                    let t = acc(grads, *id, part.len());
                    t.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::L1(ai, bi) | Op::Mse(ai, bi) => {
            let (a, b) = (get(*ai).data(), get(*bi).data());
            let n = a.len() as f64;
            let l1 = matches!(op, Op::L1(..));
            let d: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let r = x - y;
                    g[0] * if l1 { r.signum() * (r != 0.0) as u8 as f64 } else { 2.0 * r } / n
                })
                .collect();
            if need(ai) {
                let ga = acc(grads, *ai, d.len());
                ga.iter_mut().zip(&d).for_each(|(t, v)| *t += v);
            }
            if need(bi) {
                let gb = acc(grads, *bi, d.len());
                gb.iter_mut().zip(&d).for_each(|(t, v)| *t -= v);
            }
        }
        Op::CosineSimilarity(ai, bi) => {
            let (a, b) = (get(*ai), get(*bi));
            let (n, d) = (a.rows(), a.cols());
            let m = b.rows();
            let (na, nb) = (row_norms(a), row_norms(b));
            let ah = normalized_rows(a, &na);
            let bh = normalized_rows(b, &nb);
            // d(x/|x|) applied row-wise to the gradient w.r.t. the normalized rows.
            let project = |dh: &mut [f64], h: &[f64], norms: &[f64], rows: usize| {
                for i in 0..rows {
                    let r = i * d..(i + 1) * d;
                    let nrm = norms[i];
                    if nrm < NORM_EPS {
                        dh[r].iter_mut().for_each(|v| *v /= NORM_EPS);
                        continue;
                    }
                    let dot: f64 = dh[r.clone()].iter().zip(&h[r.clone()]).map(|(x, y)| x * y).sum();
                    for j in r {
                        dh[j] = (dh[j] - h[j] * dot) / nrm;
                    }
                }
            };
            if need(ai) {
                let mut dah = vec![0.0; n * d];
                gemm(n, m, d, g, (m, 1), &bh, (d, 1), 0.0, &mut dah);
                project(&mut dah, &ah, &na, n);
                let ga = acc(grads, *ai, n * d);
                ga.iter_mut().zip(&dah).for_each(|(t, v)| *t += v);
            }
            if need(bi) {
                let mut dbh = vec![0.0; m * d];
                gemm(m, n, d, g, (1, m), &ah, (d, 1), 0.0, &mut dbh);
                project(&mut dbh, &bh, &nb, m);
                let gb = acc(grads, *bi, m * d);
                gb.iter_mut().zip(&dbh).for_each(|(t, v)| *t += v);
            }
        }
        Op::SoftCrossEntropy { logits, targets } => {
            let (z, q) = (get(*logits), get(*targets));
            let (rows, cols) = last_axis(z);
            let lp = log_softmax_rows(z.data(), rows, cols);
            let scale = g[0] / rows as f64;
            if need(logits) {
                let gz = acc(grads, *logits, z.len());
                for i in 0..rows {
                    let r = i * cols..(i + 1) * cols;
                    let qs: f64 = q.data()[r.clone()].iter().sum();
                    for j in r {
                        gz[j] += scale * (lp[j].exp() * qs - q.data()[j]);
                    }
                }
            }
            if need(targets) {
                let gq = acc(grads, *targets, q.len());
                for j in 0..q.len() {
                    gq[j] -= scale * lp[j];
                }
            }
        }
    }
}

/// Maximum relative error between analytic gradients and fourth-order
/// central differences over every element of every `requires_grad` leaf.
pub fn gradcheck(graph: &mut Graph, bindings: &Bindings, eps: f64) -> Result<f64> {
    gradcheck_subset(graph, bindings, eps, usize::MAX)
}

/// Like [`gradcheck`], but probes at most `max_per_leaf` evenly spaced
/// elements of each leaf.
pub fn gradcheck_subset(
    graph: &mut Graph,
    bindings: &Bindings,
    eps: f64,
    max_per_leaf: usize,
) -> Result<f64> {
    let out = graph.forward(bindings)?;
    if out.len() != 1 {
        return Err(TensorError::NotScalar(out.shape().to_vec()));
    }
    let grads = graph.backward(bindings, &Tensor::scalar(1.0))?;
    let mut worst: f64 = 0.0;
    let leaves: Vec<NodeId> = graph
        .leaves()
        .into_iter()
        .filter(|l| l.2)
        .map(|l| l.1)
        .collect();
    for id in leaves {
        let base = bindings.get(id).expect("bound");
        let analytic = &grads[&id];
        let n = base.len();
        let step = n.div_ceil(max_per_leaf.min(n)).max(1);
        for k in (0..n).step_by(step) {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[k] += delta;
                let mut b = bindings.clone();
                b.bind(id, &t);
                Ok(graph.forward(&b)?.item())
            };
            let numeric = (8.0 * (probe(eps)? - probe(-eps)?) - (probe(2.0 * eps)? - probe(-2.0 * eps)?)) / (12.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    // Leave the cache consistent with the caller's bindings.
    graph.forward(bindings)?;
    Ok(worst)
}
