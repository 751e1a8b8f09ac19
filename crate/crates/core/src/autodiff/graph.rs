use std::fmt;
use std::sync::Arc;

use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node inside a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied operation.
///
/// `vjp` is the numeric pullback used when gradients are not themselves
/// differentiated. `vjp_graph` builds the pullback out of graph ops so that
/// it can be differentiated again; ops that leave it unimplemented cannot be
/// used under `create_graph`.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>>;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Result<Vec<Option<Tensor>>>;

    fn vjp_graph(
        &self,
        _graph: &mut Graph,
        _inputs: &[NodeId],
        _output: NodeId,
        _upstream: NodeId,
    ) -> Option<Result<Vec<Option<NodeId>>>> {
        None
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Param,
    Constant,
    Placeholder,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// `inputs[0]` is a one-element tensor scaling `inputs[1]`.
    MulScalar,
    MatMul,
    Transpose,
    Sum,
    Mean,
    /// `[n, m] -> [m]`
    SumRows,
    /// `[m] -> [n, m]`
    BroadcastRows(usize),
    /// `[n, m] -> [n]`
    RowSum,
    /// `[n] -> [n, m]`
    BroadcastCols(usize),
    BroadcastScalar,
    Relu,
    /// Heaviside step `x > 0`; has zero derivative.
    ReluMask,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Square,
    Reshape,
    /// Concatenation along axis 0.
    Concat,
    SliceRows {
        start: usize,
        len: usize,
    },
    PadRows {
        start: usize,
    },
    Mse,
    Softmax,
    SoftmaxCrossEntropy(Arc<Tensor>),
    SigmoidCrossEntropy(Arc<Tensor>),
    Custom(Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Placeholder => "placeholder",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar => "mul_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::RowSum => "row_sum",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Reshape => "reshape",
            Op::Concat => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::PadRows { .. } => "pad_rows",
            Op::Mse => "mse",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::SigmoidCrossEntropy(_) => "sigmoid_cross_entropy",
            Op::Custom(_) => "custom",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Param | Op::Constant | Op::Placeholder)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: SmallVec<[NodeId; 2]>,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

/// Which scalar to differentiate, with respect to which nodes.
#[derive(Clone, Debug)]
pub struct GradientRequest {
    pub output: NodeId,
    pub wrt: Vec<NodeId>,
    /// Keep the returned gradients differentiable.
    pub create_graph: bool,
}

impl GradientRequest {
    pub fn new(output: NodeId, wrt: Vec<NodeId>) -> Self {
        GradientRequest {
            output,
            wrt,
            create_graph: false,
        }
    }

    pub fn create_graph(mut self, yes: bool) -> Self {
        self.create_graph = yes;
        self
    }
}

/// Append-only computation graph. Values are computed as soon as every
/// input is known, so a graph built on bound leaves is fully evaluated
/// during construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
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

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// The cached value, if already computed.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    fn push_leaf(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: SmallVec::new(),
            shape,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf holding a parameter value.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push_leaf(Op::Param, shape, Some(value))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push_leaf(Op::Constant, shape, Some(value))
    }

    /// A leaf whose value is supplied later through [`Graph::bind`].
    pub fn placeholder(&mut self, shape: &[usize]) -> NodeId {
        self.push_leaf(Op::Placeholder, shape.to_vec(), None)
    }

    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Placeholder) {
            return Err(Error::contract(format!("node {} is not a placeholder", id.0)));
        }
        if node.value.is_some() {
            return Err(Error::contract(format!("placeholder {} is already bound", id.0)));
        }
        same_shape("bind", &node.shape, value.shape())?;
        node.value = Some(value);
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: SmallVec<[NodeId; 2]>, shape: Vec<usize>) -> Result<NodeId> {
        let value = {
            let vals: Option<SmallVec<[&Tensor; 2]>> = inputs.iter().map(|i| self.nodes[i.0].value.as_ref()).collect();
            match vals {
                Some(vals) => Some(compute(&op, &vals, &shape)?),
                None => None,
            }
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Forward value of `id`, computing anything that was deferred by
    /// unbound placeholders.
    pub fn evaluate(&mut self, id: NodeId) -> Result<&Tensor> {
        if self.nodes[id.0].value.is_none() {
            let mut needed = vec![false; id.0 + 1];
            let mut stack = vec![id.0];
            while let Some(i) = stack.pop() {
                if needed[i] || self.nodes[i].value.is_some() {
                    continue;
                }
                needed[i] = true;
                if matches!(self.nodes[i].op, Op::Placeholder) {
                    return Err(Error::config(format!("placeholder node {} is unbound", i)));
                }
                stack.extend(self.nodes[i].inputs.iter().map(|n| n.0));
            }
            for i in 0..=id.0 {
                if !needed[i] {
                    continue;
                }
                let value = {
                    let node = &self.nodes[i];
                    let vals: SmallVec<[&Tensor; 2]> = node
                        .inputs
                        .iter()
                        .map(|n| self.nodes[n.0].value.as_ref().expect("inputs evaluated first"))
                        .collect();
                    compute(&node.op, &vals, &node.shape)?
                };
                self.nodes[i].value = Some(value);
            }
        }
        Ok(self.nodes[id.0].value.as_ref().expect("evaluated"))
    }

    /// Convenience: evaluate a one-element node to `f64`.
    pub fn scalar_value(&mut self, id: NodeId) -> Result<f64> {
        self.evaluate(id)?.item()
    }

    // ---- op builders -------------------------------------------------

    fn binary_same(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = op.name();
        same_shape(name, self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        self.push(op, smallvec![a, b], shape)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.push(op, smallvec![a], shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Div, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar(c), a)
    }

    /// `s * a` where `s` has exactly one element.
    pub fn mul_scalar(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::shape("mul_scalar", self.shape(s), &[]));
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar, smallvec![s, a], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let shape = vec![sa[0], sb[1]];
        self.push(Op::MatMul, smallvec![a, b], shape)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let shape = vec![s[1], s[0]];
        self.push(Op::Transpose, smallvec![a], shape)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, smallvec![a], vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, smallvec![a], vec![])
    }

    fn matrix_dims(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn vector_len(&self, op: &'static str, a: NodeId) -> Result<usize> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(Error::shape(op, s, &[0]));
        }
        Ok(s[0])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, m) = self.matrix_dims("sum_rows", a)?;
        self.push(Op::SumRows, smallvec![a], vec![m])
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let m = self.vector_len("broadcast_rows", a)?;
        self.push(Op::BroadcastRows(rows), smallvec![a], vec![rows, m])
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, _) = self.matrix_dims("row_sum", a)?;
        self.push(Op::RowSum, smallvec![a], vec![n])
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let n = self.vector_len("broadcast_cols", a)?;
        self.push(Op::BroadcastCols(cols), smallvec![a], vec![n, cols])
    }

    /// Repeat a one-element tensor to `shape`.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(self.shape(a)) != 1 {
            return Err(Error::shape("broadcast_scalar", self.shape(a), &[]));
        }
        self.push(Op::BroadcastScalar, smallvec![a], shape.to_vec())
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a)
    }

    pub fn relu_mask(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::ReluMask, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape, smallvec![a], shape.to_vec())
    }

    /// Flatten to a vector.
    pub fn vec(&mut self, a: NodeId) -> Result<NodeId> {
        let n = numel(self.shape(a));
        self.reshape(a, &[n])
    }

    /// Concatenate along axis 0. All inputs must agree on the trailing dims.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let s0 = self.shape(first).to_vec();
        if s0.is_empty() {
            return Err(Error::shape("concat", &s0, &[0]));
        }
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[1..] != s0[1..] {
                return Err(Error::shape("concat", &s0, s));
            }
            rows += s[0];
        }
        let mut shape = s0;
        shape[0] = rows;
        self.push(Op::Concat, parts.iter().copied().collect(), shape)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape("slice_rows", &s, &[start + len]));
        }
        let mut shape = s;
        shape[0] = len;
        self.push(Op::SliceRows { start, len }, smallvec![a], shape)
    }

    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + s[0] > total {
            return Err(Error::shape("pad_rows", &s, &[total]));
        }
        let mut shape = s;
        shape[0] = total;
        self.push(Op::PadRows { start }, smallvec![a], shape)
    }

    /// Mean of `(target - pred)^2` over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        same_shape("mse", self.shape(pred), self.shape(target))?;
        self.push(Op::Mse, smallvec![pred, target], vec![])
    }

    /// Row-wise softmax of a `[n, k]` matrix.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix_dims("softmax", a)?;
        self.unary(Op::Softmax, a)
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and
    /// the (one-hot or soft) label rows.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
        self.matrix_dims("softmax_cross_entropy", logits)?;
        same_shape("softmax_cross_entropy", self.shape(logits), labels.shape())?;
        self.push(
            Op::SoftmaxCrossEntropy(Arc::new(labels.clone())),
            smallvec![logits],
            vec![],
        )
    }

    /// Mean over elements of the binary cross-entropy of `sigmoid(logits)`.
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
        same_shape("sigmoid_cross_entropy", self.shape(logits), labels.shape())?;
        self.push(
            Op::SigmoidCrossEntropy(Arc::new(labels.clone())),
            smallvec![logits],
            vec![],
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.shape(i)).collect();
        let shape = op.output_shape(&shapes)?;
        self.push(Op::Custom(op), inputs.iter().copied().collect(), shape)
    }

    // ---- reverse mode ------------------------------------------------

    /// Reverse-mode gradient of a scalar node. Every pullback is expressed
    /// with graph ops, so with `create_graph` the returned nodes can be
    /// differentiated again. Without it the gradients come back as
    /// constants and the intermediate nodes are discarded.
    pub fn grad(&mut self, req: &GradientRequest) -> Result<Vec<NodeId>> {
        let out = req.output.0;
        if numel(self.shape(req.output)) != 1 {
            return Err(Error::contract(format!(
                "gradient output must be scalar, got shape {:?}",
                self.shape(req.output)
            )));
        }
        let mut dep = vec![false; out + 1];
        for w in &req.wrt {
            if w.0 <= out {
                dep[w.0] = true;
            }
        }
        for i in 0..=out {
            if !dep[i] {
                dep[i] = self.nodes[i].inputs.iter().any(|n| dep[n.0]);
            }
        }

        let base_len = self.nodes.len();
        let mut adj: Vec<Option<NodeId>> = vec![None; out + 1];
        if dep[out] {
            let shape = self.shape(req.output).to_vec();
            adj[out] = Some(self.constant(Tensor::ones(&shape)));
        }
        for i in (0..=out).rev() {
            if !dep[i] || self.nodes[i].op.is_leaf() {
                continue;
            }
            let Some(upstream) = adj[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let needs: SmallVec<[bool; 2]> = inputs.iter().map(|n| dep[n.0]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let contribs = self.pullback(NodeId(i), upstream, &needs, req.create_graph)?;
            for (k, c) in contribs.into_iter().enumerate() {
                let (Some(c), true) = (c, needs[k]) else { continue };
                let j = inputs[k].0;
                adj[j] = Some(match adj[j] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        let mut result = Vec::with_capacity(req.wrt.len());
        for w in &req.wrt {
            let g = match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            result.push(g);
        }

        if req.create_graph {
            return Ok(result);
        }
        let mut values = Vec::with_capacity(result.len());
        for &g in &result {
            values.push(self.evaluate(g)?.clone());
        }
        self.nodes.truncate(base_len);
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    fn pullback(
        &mut self,
        id: NodeId,
        u: NodeId,
        needs: &[bool],
        create_graph: bool,
    ) -> Result<SmallVec<[Option<NodeId>; 2]>> {
        let node = self.nodes[id.0].clone();
        let ins = &node.inputs;
        let x = ins.first().copied();
        let one = |v: NodeId| -> SmallVec<[Option<NodeId>; 2]> { smallvec![Some(v)] };
        Ok(match &node.op {
            Op::Param | Op::Constant | Op::Placeholder => SmallVec::new(),
            Op::Add => smallvec![Some(u), Some(u)],
            Op::Sub => {
                let nu = if needs[1] { Some(self.neg(u)?) } else { None };
                smallvec![Some(u), nu]
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let da = if needs[0] { Some(self.mul(u, b)?) } else { None };
                let db = if needs[1] { Some(self.mul(u, a)?) } else { None };
                smallvec![da, db]
            }
            Op::Div => {
                let (a, b) = (ins[0], ins[1]);
                let _ = a;
                let da = if needs[0] { Some(self.div(u, b)?) } else { None };
                let db = if needs[1] {
                    let t = self.mul(u, id)?;
                    let t = self.div(t, b)?;
                    Some(self.neg(t)?)
                } else {
                    None
                };
                smallvec![da, db]
            }
            Op::Neg => one(self.neg(u)?),
            Op::Scale(c) => one(self.scale(u, *c)?),
            Op::AddScalar(_) => one(u),
            Op::MulScalar => {
                let (s, a) = (ins[0], ins[1]);
                let ds = if needs[0] {
                    let t = self.mul(u, a)?;
                    let t = self.sum(t)?;
                    let s_shape = self.shape(s).to_vec();
                    Some(self.reshape(t, &s_shape)?)
                } else {
                    None
                };
                let da = if needs[1] { Some(self.mul_scalar(s, u)?) } else { None };
                smallvec![ds, da]
            }
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let da = if needs[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(u, bt)?)
                } else {
                    None
                };
                let db = if needs[1] {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, u)?)
                } else {
                    None
                };
                smallvec![da, db]
            }
            Op::Transpose => one(self.transpose(u)?),
            Op::Sum => {
                let shape = self.shape(x.unwrap()).to_vec();
                one(self.broadcast_scalar(u, &shape)?)
            }
            Op::Mean => {
                let shape = self.shape(x.unwrap()).to_vec();
                let b = self.broadcast_scalar(u, &shape)?;
                one(self.scale(b, 1.0 / numel(&shape) as f64)?)
            }
            Op::SumRows => {
                let rows = self.shape(x.unwrap())[0];
                one(self.broadcast_rows(u, rows)?)
            }
            Op::BroadcastRows(_) => one(self.sum_rows(u)?),
            Op::RowSum => {
                let cols = self.shape(x.unwrap())[1];
                one(self.broadcast_cols(u, cols)?)
            }
            Op::BroadcastCols(_) => one(self.row_sum(u)?),
            Op::BroadcastScalar => {
                let s = self.sum(u)?;
                let shape = self.shape(x.unwrap()).to_vec();
                one(self.reshape(s, &shape)?)
            }
            Op::Relu => {
                let m = self.relu_mask(x.unwrap())?;
                one(self.mul(u, m)?)
            }
            Op::ReluMask => smallvec![None],
            Op::Sigmoid => {
                let ns = self.neg(id)?;
                let one_minus = self.add_scalar(ns, 1.0)?;
                let d = self.mul(id, one_minus)?;
                one(self.mul(u, d)?)
            }
            Op::Tanh => {
                let t2 = self.square(id)?;
                let nt2 = self.neg(t2)?;
                let d = self.add_scalar(nt2, 1.0)?;
                one(self.mul(u, d)?)
            }
            Op::Log => one(self.div(u, x.unwrap())?),
            Op::Exp => one(self.mul(u, id)?),
            Op::Square => {
                let t = self.mul(u, x.unwrap())?;
                one(self.scale(t, 2.0)?)
            }
            Op::Reshape => {
                let shape = self.shape(x.unwrap()).to_vec();
                one(self.reshape(u, &shape)?)
            }
            Op::Concat => {
                let mut out = SmallVec::new();
                let mut offset = 0;
                for (k, &p) in ins.iter().enumerate() {
                    let rows = self.shape(p)[0];
                    out.push(if needs[k] {
                        Some(self.slice_rows(u, offset, rows)?)
                    } else {
                        None
                    });
                    offset += rows;
                }
                out
            }
            Op::SliceRows { start, .. } => {
                let total = self.shape(x.unwrap())[0];
                one(self.pad_rows(u, *start, total)?)
            }
            Op::PadRows { start, .. } => {
                let len = self.shape(x.unwrap())[0];
                one(self.slice_rows(u, *start, len)?)
            }
            Op::Mse => {
                let (p, t) = (ins[0], ins[1]);
                let n = numel(self.shape(p)) as f64;
                let diff = self.sub(p, t)?;
                let g = self.scale(diff, 2.0 / n)?;
                let g = self.mul_scalar(u, g)?;
                let dt = if needs[1] { Some(self.neg(g)?) } else { None };
                smallvec![Some(g), dt]
            }
            Op::Softmax => {
                let cols = self.shape(id)[1];
                let us = self.mul(u, id)?;
                let r = self.row_sum(us)?;
                let rb = self.broadcast_cols(r, cols)?;
                let centered = self.sub(u, rb)?;
                one(self.mul(id, centered)?)
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let z = x.unwrap();
                let rows = self.shape(z)[0] as f64;
                let s = self.softmax(z)?;
                let y = self.constant((**labels).clone());
                let d = self.sub(s, y)?;
                let d = self.scale(d, 1.0 / rows)?;
                one(self.mul_scalar(u, d)?)
            }
            Op::SigmoidCrossEntropy(labels) => {
                let z = x.unwrap();
                let n = numel(self.shape(z)) as f64;
                let s = self.sigmoid(z)?;
                let y = self.constant((**labels).clone());
                let d = self.sub(s, y)?;
                let d = self.scale(d, 1.0 / n)?;
                one(self.mul_scalar(u, d)?)
            }
            Op::Custom(op) => {
                let inputs: Vec<NodeId> = ins.to_vec();
                if let Some(res) = op.vjp_graph(self, &inputs, id, u) {
                    res?.into_iter().collect()
                } else if create_graph {
                    return Err(Error::Unsupported(format!(
                        "custom op `{}` has no second-derivative rule",
                        op.name()
                    )));
                } else {
                    let mut vals = Vec::with_capacity(inputs.len());
                    for &i in &inputs {
                        vals.push(self.evaluate(i)?.clone());
                    }
                    let out_v = self.evaluate(id)?.clone();
                    let u_v = self.evaluate(u)?.clone();
                    let refs: Vec<&Tensor> = vals.iter().collect();
                    let grads = op.vjp(&refs, &out_v, &u_v)?;
                    grads.into_iter().map(|g| g.map(|t| self.constant(t))).collect()
                }
            }
        })
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (n, k) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(n * k);
    for row in t.data().chunks(k.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: SmallVec<[f64; 8]> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(vec![n, k], out).expect("softmax shape")
}

fn compute(op: &Op, ins: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
    let t = |data: Vec<f64>| Tensor::new(shape.to_vec(), data);
    match op {
        Op::Param | Op::Constant | Op::Placeholder => unreachable!("leaves carry their value"),
        Op::Add => ins[0].add(ins[1]),
        Op::Sub => ins[0].sub(ins[1]),
        Op::Mul => ins[0].mul(ins[1]),
        Op::Div => ins[0].zip_with(ins[1], "div", |a, b| a / b),
        Op::Neg => Ok(ins[0].map(|v| -v)),
        Op::Scale(c) => Ok(ins[0].scale(*c)),
        Op::AddScalar(c) => Ok(ins[0].map(|v| v + c)),
        Op::MulScalar => {
            let s = ins[0].data()[0];
            Ok(ins[1].map(|v| s * v))
        }
        Op::MatMul => ins[0].matmul(ins[1]),
        Op::Transpose => ins[0].transpose(),
        Op::Sum => Ok(Tensor::scalar(ins[0].sum())),
        Op::Mean => Ok(Tensor::scalar(ins[0].mean())),
        Op::SumRows => {
            let m = shape[0];
            let mut out = vec![0.0; m];
            for row in ins[0].data().chunks(m.max(1)) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            t(out)
        }
        Op::BroadcastRows(rows) => {
            let mut out = Vec::with_capacity(rows * ins[0].numel());
            for _ in 0..*rows {
                out.extend_from_slice(ins[0].data());
            }
            t(out)
        }
        Op::RowSum => {
            let cols = ins[0].shape()[1];
            t(ins[0].data().chunks(cols.max(1)).map(|r| r.iter().sum()).collect())
        }
        Op::BroadcastCols(cols) => {
            let mut out = Vec::with_capacity(cols * ins[0].numel());
            for &v in ins[0].data() {
                out.extend(std::iter::repeat_n(v, *cols));
            }
            t(out)
        }
        Op::BroadcastScalar => Ok(Tensor::filled(shape, ins[0].data()[0])),
        Op::Relu => Ok(ins[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::ReluMask => Ok(ins[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 })),
        Op::Sigmoid => Ok(ins[0].map(sigmoid)),
        Op::Tanh => Ok(ins[0].map(f64::tanh)),
        Op::Log => Ok(ins[0].map(f64::ln)),
        Op::Exp => Ok(ins[0].map(f64::exp)),
        Op::Square => Ok(ins[0].map(|v| v * v)),
        Op::Reshape => ins[0].reshape(shape),
        Op::Concat => {
            let mut out = Vec::with_capacity(numel(shape));
            for p in ins {
                out.extend_from_slice(p.data());
            }
            t(out)
        }
        Op::SliceRows { start, len } => {
            let inner = ins[0].numel() / ins[0].shape()[0].max(1);
            t(ins[0].data()[start * inner..(start + len) * inner].to_vec())
        }
        Op::PadRows { start, .. } => {
            let rows = ins[0].shape()[0];
            let inner = ins[0].numel().checked_div(rows).unwrap_or(0);
            let mut out = vec![0.0; numel(shape)];
            out[start * inner..(start + rows) * inner].copy_from_slice(ins[0].data());
            t(out)
        }
        Op::Mse => {
            let d = ins[0].sub(ins[1])?;
            Ok(Tensor::scalar(
                d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64,
            ))
        }
        Op::Softmax => Ok(softmax_rows(ins[0])),
        Op::SoftmaxCrossEntropy(labels) => {
            let z = ins[0];
            let k = z.shape()[1];
            let n = z.shape()[0];
            let mut total = 0.0;
            for (row, y) in z.data().chunks(k.max(1)).zip(labels.data().chunks(k.max(1))) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += row.iter().zip(y).map(|(zv, yv)| yv * (lse - zv)).sum::<f64>();
            }
            Ok(Tensor::scalar(total / n as f64))
        }
        Op::SigmoidCrossEntropy(labels) => {
            let z = ins[0];
            let total: f64 = z
                .data()
                .iter()
                .zip(labels.data())
                .map(|(&zv, &yv)| softplus(zv) - yv * zv)
                .sum();
            Ok(Tensor::scalar(total / z.numel() as f64))
        }
        Op::Custom(op) => {
            let out = op.forward(ins)?;
            same_shape("custom", out.shape(), shape)?;
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn abx_product() {
        let mut g = Graph::new();
        let a = g.param(s(2.0));
        let b = g.param(s(3.0));
        let x = g.constant(s(1.0));
        let ab = g.mul(a, b).unwrap();
        let y = g.mul(ab, x).unwrap();
        assert_eq!(g.scalar_value(y).unwrap(), 6.0);
    }

    #[test]
    fn mse_convention() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0]));
        let y = g.constant(Tensor::vector(vec![2.0]));
        let l = g.mse(p, y).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 4.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(s(0.0));
        let y = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar_value(y).unwrap(), 0.5);
    }

    #[test]
    fn unbound_placeholder_is_config_error() {
        let mut g = Graph::new();
        let p = g.placeholder(&[2]);
        let q = g.square(p).unwrap();
        let l = g.sum(q).unwrap();
        assert!(matches!(g.evaluate(l), Err(Error::Config(_))));
        g.bind(p, Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 5.0);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn shallow_postadapt_slope() {
        // d/dc (1-alpha)^2 (c - theta)^2 at c=0, theta=1, alpha=0.1
        let mut g = Graph::new();
        let c = g.param(s(0.0));
        let d = g.add_scalar(c, -1.0).unwrap();
        let sq = g.square(d).unwrap();
        let l = g.scale(sq, 0.81).unwrap();
        let gc = g.grad(&GradientRequest::new(l, vec![c])).unwrap();
        let v = g.scalar_value(gc[0]).unwrap();
        assert!((v + 1.62).abs() < 1e-12);
    }

    #[test]
    fn mixed_partial_of_bilinear() {
        let mut g = Graph::new();
        let a = g.param(s(0.7));
        let b = g.param(s(-1.3));
        let ab = g.mul(a, b).unwrap();
        let gb = g.grad(&GradientRequest::new(ab, vec![b]).create_graph(true)).unwrap()[0];
        let gab = g.grad(&GradientRequest::new(gb, vec![a])).unwrap()[0];
        assert_eq!(g.scalar_value(gab).unwrap(), 1.0);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        let gx = g.grad(&GradientRequest::new(l, vec![x])).unwrap()[0];
        assert_eq!(g.value(gx).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        let gx = g.grad(&GradientRequest::new(l, vec![x])).unwrap()[0];
        assert_eq!(g.value(gx).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.grad(&GradientRequest::new(x, vec![x])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unused_wrt_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.param(Tensor::zeros(&[3]));
        let l = g.sum(x).unwrap();
        let gr = g.grad(&GradientRequest::new(l, vec![x, y])).unwrap();
        assert_eq!(g.value(gr[1]).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn first_order_grad_discards_intermediates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let q = g.square(x).unwrap();
        let l = g.sum(q).unwrap();
        let before = g.len();
        let gr = g.grad(&GradientRequest::new(l, vec![x])).unwrap();
        assert_eq!(g.len(), before + 1);
        assert_eq!(g.op_name(gr[0]), "constant");
    }

    #[derive(Debug)]
    struct Cube;

    impl CustomOp for Cube {
        fn name(&self) -> &str {
            "cube"
        }
        fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
            Ok(inputs[0].to_vec())
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|v| v * v * v))
        }
        fn vjp(&self, inputs: &[&Tensor], _o: &Tensor, u: &Tensor) -> Result<Vec<Option<Tensor>>> {
            Ok(vec![Some(inputs[0].map(|v| 3.0 * v * v).mul(u)?)])
        }
    }

    #[test]
    fn custom_op_without_second_order_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![2.0]));
        let c = g.custom(Arc::new(Cube), &[x]).unwrap();
        let l = g.sum(c).unwrap();
        let gx = g.grad(&GradientRequest::new(l, vec![x])).unwrap()[0];
        assert_eq!(g.value(gx).unwrap().data(), &[12.0]);
        let err = g.grad(&GradientRequest::new(l, vec![x]).create_graph(true));
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }
}
