//! Op records, forward evaluation, and reverse-mode gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{gemm, transpose};

use super::tensor::{NamedTensors, Tensor};

/// Index of a node within its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Supported operations. Elementwise binary ops require identical shapes;
/// use `Broadcast` to expand a smaller operand first.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf(String),
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    Broadcast(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    constant: Option<Tensor>,
}

/// A computation graph: topologically ordered op records plus named leaves.
/// Builder calls append nodes, so inputs always precede their consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|s| s.as_str())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, constant: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, shape, constant });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &str, detail: String) -> Error {
        Error::shape(format!("node {} ({op})", self.nodes.len()), detail, "see context")
    }

    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::invalid(format!("duplicate leaf name {name:?}")));
        }
        let id = self.push(Op::Leaf(name.to_string()), shape.to_vec(), None);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape, None))
    }

    fn binary(&mut self, op_name: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let detail = format!("{sa:?} vs {sb:?}");
            return Err(self.mismatch(op_name, detail));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s, None))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary("div", a, b)?;
        Ok(self.push(Op::Div(a, b), s, None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s, None)
    }

    fn unary(&mut self, op: impl FnOnce(NodeId) -> Op, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op(a), s, None)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::LeakyRelu(a, slope), s, None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square, a)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1], None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1], None)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat of zero inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(self.mismatch("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut out = first.clone();
        for &i in &inputs[1..] {
            let s = self.shape(i);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(self.mismatch("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            out[axis] += s[axis];
        }
        Ok(self.push(Op::Concat(inputs.to_vec(), axis), out, None))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(self.mismatch(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let mut out = s;
        out[axis] = len;
        Ok(self.push(Op::Slice(a, axis, start, len), out, None))
    }

    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if !broadcast_compatible(&s, target) {
            return Err(self.mismatch("broadcast", format!("{s:?} -> {target:?}")));
        }
        Ok(self.push(Op::Broadcast(a, target.to_vec()), target.to_vec(), None))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        let old: usize = s.iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(self.mismatch("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a, shape.to_vec()), shape.to_vec(), None))
    }
}

/// Trailing-axis broadcast compatibility (each aligned dim equal or 1 in the
/// source; the source may have lower rank).
fn broadcast_compatible(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let offset = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &s)| s == dst[offset + i] || s == 1)
}

/// Tile `src` (shape `s_shape`) into `dst_shape`.
fn broadcast_values(src: &[f64], s_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let total: usize = dst_shape.iter().product();
    let offset = dst_shape.len() - s_shape.len();
    let mut out = vec![0.0; total];
    let mut dst_index = vec![0usize; dst_shape.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..dst_shape.len()).rev() {
            dst_index[d] = rem % dst_shape[d];
            rem /= dst_shape[d];
        }
        let mut src_flat = 0usize;
        for (d, &s) in s_shape.iter().enumerate() {
            let idx = if s == 1 { 0 } else { dst_index[offset + d] };
            src_flat = src_flat * s + idx;
        }
        *slot = src[src_flat];
    }
    out
}

/// Sum `grad` (shape `dst_shape`) back down onto `s_shape`.
fn broadcast_grad(grad: &[f64], s_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let src_total: usize = s_shape.iter().product();
    let offset = dst_shape.len() - s_shape.len();
    let mut out = vec![0.0; src_total];
    let mut dst_index = vec![0usize; dst_shape.len()];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..dst_shape.len()).rev() {
            dst_index[d] = rem % dst_shape[d];
            rem /= dst_shape[d];
        }
        let mut src_flat = 0usize;
        for (d, &s) in s_shape.iter().enumerate() {
            let idx = if s == 1 { 0 } else { dst_index[offset + d] };
            src_flat = src_flat * s + idx;
        }
        out[src_flat] += g;
    }
    out
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Values for every node of a forward pass.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

/// Evaluate the graph with the given leaf bindings.
pub fn forward(graph: &Graph, bindings: &NamedTensors) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let value = match &node.op {
            Op::Leaf(name) => {
                let t = bindings.get(name).ok_or_else(|| {
                    Error::invalid(format!("leaf {name:?} not bound for forward pass"))
                })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::shape(
                        format!("leaf {name:?}"),
                        format!("{:?}", node.shape),
                        format!("{:?}", t.shape()),
                    ));
                }
                t.clone()
            }
            Op::Constant => node.constant.clone().expect("constant node holds a value"),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut out = vec![0.0; m * n];
                gemm(&mut out, ta.data(), tb.data(), m, k, n);
                Tensor::new(vec![m, n], out)?
            }
            Op::Add(a, b) => zip_ew(&values[a.0], &values[b.0], |x, y| x + y),
            Op::Sub(a, b) => zip_ew(&values[a.0], &values[b.0], |x, y| x - y),
            Op::Mul(a, b) => zip_ew(&values[a.0], &values[b.0], |x, y| x * y),
            Op::Div(a, b) => zip_ew(&values[a.0], &values[b.0], |x, y| x / y),
            Op::Scale(a, c) => map_ew(&values[a.0], |x| x * c),
            Op::Sin(a) => map_ew(&values[a.0], f64::sin),
            Op::Cos(a) => map_ew(&values[a.0], f64::cos),
            Op::Exp(a) => map_ew(&values[a.0], f64::exp),
            Op::Log(a) => map_ew(&values[a.0], f64::ln),
            Op::Softplus(a) => map_ew(&values[a.0], stable_softplus),
            Op::Sigmoid(a) => map_ew(&values[a.0], stable_sigmoid),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                map_ew(&values[a.0], move |x| if x >= 0.0 { x } else { s * x })
            }
            Op::Square(a) => map_ew(&values[a.0], |x| x * x),
            Op::Sum(a) => Tensor::scalar(values[a.0].data().iter().sum()),
            Op::Mean(a) => {
                let t = &values[a.0];
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Concat(inputs, axis) => concat_forward(&values, inputs, *axis, &node.shape),
            Op::Slice(a, axis, start, len) => slice_forward(&values[a.0], *axis, *start, *len),
            Op::Broadcast(a, target) => {
                let src = &values[a.0];
                let data = broadcast_values(src.data(), src.shape(), target);
                Tensor::new(target.clone(), data)?
            }
            Op::Reshape(a, shape) => {
                Tensor::new(shape.clone(), values[a.0].data().to_vec())?
            }
        };
        if !value.all_finite() {
            return Err(Error::invalid(format!(
                "node {idx} ({}) produced non-finite values",
                node.op.name()
            )));
        }
        values.push(value);
    }
    Ok(Evaluation { values })
}

fn zip_ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape checked at build time")
}

fn map_ew(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn concat_forward(values: &[Tensor], inputs: &[NodeId], axis: usize, out_shape: &[usize]) -> Tensor {
    let rank = out_shape.len();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let out_axis = out_shape[axis];
    let mut offset = 0usize;
    for &id in inputs {
        let t = &values[id.0];
        let t_axis = t.shape()[axis];
        for o in 0..outer {
            for j in 0..t_axis {
                let src = (o * t_axis + j) * inner;
                let dst = (o * out_axis + offset + j) * inner;
                out[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
            }
        }
        offset += t_axis;
    }
    debug_assert_eq!(rank, out_shape.len());
    Tensor::new(out_shape.to_vec(), out).expect("concat shape precomputed")
}

fn slice_forward(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src_axis = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = (o * src_axis + start + j) * inner;
            let dst = (o * len + j) * inner;
            out[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    Tensor::new(out_shape, out).expect("slice shape computed")
}

/// Reverse-mode gradients of a scalar output with respect to every leaf.
pub fn backward(graph: &Graph, eval: &Evaluation, output: NodeId) -> Result<NamedTensors> {
    let out_val = eval.value(output);
    if !out_val.is_scalar() {
        return Err(Error::invalid(format!(
            "backward requires a scalar output, got shape {:?}",
            out_val.shape()
        )));
    }
    backward_seeded(graph, eval, output, &Tensor::scalar(1.0))
}

/// Reverse-mode with an explicit seed gradient at `output`; used to chain
/// gradients arriving from hand-written code outside the graph.
pub fn backward_seeded(
    graph: &Graph,
    eval: &Evaluation,
    output: NodeId,
    seed: &Tensor,
) -> Result<NamedTensors> {
    if seed.shape() != eval.value(output).shape() {
        return Err(Error::shape(
            "backward seed",
            format!("{:?}", eval.value(output).shape()),
            format!("{:?}", seed.shape()),
        ));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.nodes.len()];
    grads[output.0] = Some(seed.data().to_vec());

    for idx in (0..graph.nodes.len()).rev() {
        let Some(grad) = grads[idx].take() else { continue };
        let node = &graph.nodes[idx];
        match &node.op {
            Op::Leaf(_) | Op::Constant => {
                grads[idx] = Some(grad); // keep leaf grads for collection
                continue;
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (eval.value(*a), eval.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dY * B^T
                let bt = transpose(tb.data(), k, n);
                let mut da = vec![0.0; m * k];
                gemm(&mut da, &grad, &bt, m, n, k);
                accumulate(&mut grads[a.0], &da);
                // dB = A^T * dY
                let at = transpose(ta.data(), m, k);
                let mut db = vec![0.0; k * n];
                gemm(&mut db, &at, &grad, k, m, n);
                accumulate(&mut grads[b.0], &db);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], &grad);
                accumulate(&mut grads[b.0], &grad);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], &grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                accumulate(&mut grads[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    grad.iter().zip(eval.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> =
                    grad.iter().zip(eval.value(*a).data()).map(|(g, x)| g * x).collect();
                accumulate(&mut grads[a.0], &da);
                accumulate(&mut grads[b.0], &db);
            }
            Op::Div(a, b) => {
                let xb = eval.value(*b).data();
                let xa = eval.value(*a).data();
                let da: Vec<f64> = grad.iter().zip(xb).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(xa.iter().zip(xb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                accumulate(&mut grads[a.0], &da);
                accumulate(&mut grads[b.0], &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Sin(a) => chain(&mut grads, *a, &grad, eval.value(*a).data(), |x| x.cos()),
            Op::Cos(a) => chain(&mut grads, *a, &grad, eval.value(*a).data(), |x| -x.sin()),
            Op::Exp(a) => {
                let y = eval.value(NodeId(idx)).data();
                let da: Vec<f64> = grad.iter().zip(y).map(|(g, v)| g * v).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Log(a) => chain(&mut grads, *a, &grad, eval.value(*a).data(), |x| 1.0 / x),
            Op::Softplus(a) => {
                chain(&mut grads, *a, &grad, eval.value(*a).data(), stable_sigmoid)
            }
            Op::Sigmoid(a) => {
                let y = eval.value(NodeId(idx)).data();
                let da: Vec<f64> = grad.iter().zip(y).map(|(g, v)| g * v * (1.0 - v)).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                chain(&mut grads, *a, &grad, eval.value(*a).data(), move |x| {
                    if x >= 0.0 {
                        1.0
                    } else {
                        s
                    }
                })
            }
            Op::Square(a) => {
                chain(&mut grads, *a, &grad, eval.value(*a).data(), |x| 2.0 * x)
            }
            Op::Sum(a) => {
                let g = grad[0];
                let da = vec![g; eval.value(*a).len()];
                accumulate(&mut grads[a.0], &da);
            }
            Op::Mean(a) => {
                let count = eval.value(*a).len();
                let g = grad[0] / count as f64;
                let da = vec![g; count];
                accumulate(&mut grads[a.0], &da);
            }
            Op::Concat(inputs, axis) => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &i in inputs {
                    let t_axis = eval.value(i).shape()[*axis];
                    let mut di = vec![0.0; eval.value(i).len()];
                    for o in 0..outer {
                        for j in 0..t_axis {
                            let src = (o * out_axis + offset + j) * inner;
                            let dst = (o * t_axis + j) * inner;
                            di[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                        }
                    }
                    accumulate(&mut grads[i.0], &di);
                    offset += t_axis;
                }
            }
            Op::Slice(a, axis, start, len) => {
                let src_shape = eval.value(*a).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[*axis + 1..].iter().product();
                let src_axis = src_shape[*axis];
                let mut da = vec![0.0; eval.value(*a).len()];
                for o in 0..outer {
                    for j in 0..*len {
                        let dst = (o * src_axis + start + j) * inner;
                        let src = (o * len + j) * inner;
                        da[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                    }
                }
                accumulate(&mut grads[a.0], &da);
            }
            Op::Broadcast(a, target) => {
                let src_shape = eval.value(*a).shape();
                let da = broadcast_grad(&grad, src_shape, target);
                accumulate(&mut grads[a.0], &da);
            }
            Op::Reshape(a, _) => {
                accumulate(&mut grads[a.0], &grad);
            }
        }
    }

    let mut out = NamedTensors::new();
    for (name, id) in &graph.leaves {
        let shape = graph.nodes[id.0].shape.clone();
        let data = grads[id.0].take().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        out.insert(name.clone(), Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: &[f64]) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        None => *slot = Some(grad.to_vec()),
    }
}

fn chain(
    grads: &mut [Option<Vec<f64>>],
    input: NodeId,
    grad: &[f64],
    x: &[f64],
    dfn: impl Fn(f64) -> f64,
) {
    let da: Vec<f64> = grad.iter().zip(x).map(|(g, &v)| g * dfn(v)).collect();
    accumulate(&mut grads[input.0], &da);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::NamedTensors;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind(pairs: &[(&str, Tensor)]) -> NamedTensors {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn identity_graph_echoes_input() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 3]).unwrap();
        let input = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, -5.0, 6.0]).unwrap();
        let eval = forward(&g, &bind(&[("x", input.clone())])).unwrap();
        assert_eq!(eval.value(x), &input);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1]).unwrap();
        let y = g.softplus(x);
        let eval = forward(&g, &bind(&[("x", Tensor::scalar(0.0))])).unwrap();
        assert!((eval.value(y).item() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn three_layer_mlp_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = [5usize, 7, 6, 4];
        let mut weights: Vec<Vec<f64>> = Vec::new();
        let mut biases: Vec<Vec<f64>> = Vec::new();
        for l in 0..3 {
            weights.push((0..dims[l] * dims[l + 1]).map(|_| rng.gen::<f64>() - 0.5).collect());
            biases.push((0..dims[l + 1]).map(|_| rng.gen::<f64>() - 0.5).collect());
        }
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen::<f64>() - 0.5).collect();

        // Graph route: x as a 1 x d row vector through matmul/add/leaky.
        let mut g = Graph::new();
        let xin = g.leaf("x", &[1, dims[0]]).unwrap();
        let mut h = xin;
        for l in 0..3 {
            let w = g.constant(
                Tensor::matrix(dims[l], dims[l + 1], weights[l].clone()).unwrap(),
            );
            let b = g.constant(Tensor::matrix(1, dims[l + 1], biases[l].clone()).unwrap());
            let mm = g.matmul(h, w).unwrap();
            let lin = g.add(mm, b).unwrap();
            h = if l < 2 { g.leaky_relu(lin, 0.2) } else { lin };
        }
        let eval =
            forward(&g, &bind(&[("x", Tensor::matrix(1, dims[0], x.clone()).unwrap())])).unwrap();

        // Straight-line oracle: plain loops, same accumulation order.
        let mut cur = x;
        for l in 0..3 {
            let mut next = vec![0.0; dims[l + 1]];
            for (j, n) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &xv) in cur.iter().enumerate() {
                    acc += xv * weights[l][i * dims[l + 1] + j];
                }
                acc += biases[l][j];
                *n = if l < 2 && acc < 0.0 { 0.2 * acc } else { acc };
            }
            cur = next;
        }
        for (a, b) in eval.value(h).data().iter().zip(&cur) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1]).unwrap();
        let y = g.square(x);
        let eval = forward(&g, &bind(&[("x", Tensor::scalar(3.0))])).unwrap();
        let grads = backward(&g, &eval, y).unwrap();
        assert!((grads["x"].item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sum_sin_gradient_is_cos() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[4]).unwrap();
        let s = g.sin(x);
        let y = g.sum(s);
        let vals = vec![0.3, -1.2, 2.4, 0.0];
        let eval = forward(&g, &bind(&[("x", Tensor::vector(vals.clone()))])).unwrap();
        let grads = backward(&g, &eval, y).unwrap();
        for (gv, xv) in grads["x"].data().iter().zip(&vals) {
            assert!((gv - xv.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3]).unwrap();
        let y = g.square(x);
        let eval = forward(&g, &bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))])).unwrap();
        assert!(backward(&g, &eval, y).is_err());
    }

    #[test]
    fn shape_mismatch_reports_node_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 3]).unwrap();
        let b = g.leaf("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn log_of_nonpositive_surfaces_at_eval() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1]).unwrap();
        let _y = g.log(x);
        let err = forward(&g, &bind(&[("x", Tensor::scalar(-1.0))])).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[8]).unwrap();
        let s = g.sigmoid(x);
        let e = g.exp(s);
        let m = g.mean(e);
        let vals: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let binds = bind(&[("x", Tensor::vector(vals))]);
        let e1 = forward(&g, &binds).unwrap();
        let e2 = forward(&g, &binds).unwrap();
        assert_eq!(e1.value(m).data(), e2.value(m).data());
    }

    #[test]
    fn concat_slice_broadcast_reshape_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 2]).unwrap();
        let b = g.leaf("b", &[2, 3]).unwrap();
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 5]);
        let sl = g.slice(cat, 1, 2, 3).unwrap();
        let rs = g.reshape(sl, &[6]).unwrap();
        let bias = g.leaf("c", &[1]).unwrap();
        let bc = g.broadcast(bias, &[6]).unwrap();
        let out = g.add(rs, bc).unwrap();
        let eval = forward(
            &g,
            &bind(&[
                ("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
                ("b", Tensor::matrix(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap()),
                ("c", Tensor::scalar(0.5)),
            ]),
        )
        .unwrap();
        assert_eq!(eval.value(out).data(), &[5.5, 6.5, 7.5, 8.5, 9.5, 10.5]);
    }
}
