use std::collections::BTreeMap;

use super::{GraphError, Tensor};

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(String),
    Param,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `B×k` plus a broadcast `k` row.
    AddRow(NodeId, NodeId),
    /// `B×k` minus a broadcast `k` row.
    SubRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    L2Norm(NodeId),
    RowNorms(NodeId),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Cosine(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(NodeId, NodeId),
    GradReverse(NodeId, f64),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::L2Norm(_) => "l2_norm",
            Op::RowNorms(_) => "row_norms",
            Op::Dot(..) => "dot",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Cosine(..) => "cosine",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GradReverse(..) => "grad_reverse",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param | Op::Const => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b)
            | Op::Cosine(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::L2Norm(a)
            | Op::RowNorms(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::GradReverse(a, _) => vec![a],
            Op::GatherRows(a, _) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Option<Tensor>,
}

/// Append-only computation graph with lazily evaluated, cached values.
///
/// Operands always precede their consumers, so node order is a valid
/// topological order. Leaves are inputs (bound per evaluation), trainable
/// parameters, or constants. Shape checks happen at evaluation time.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

macro_rules! binary {
    ($name:ident, $variant:ident) => {
        pub fn $name(&mut self, a: NodeId, b: NodeId) -> NodeId {
            self.push(Op::$variant(a, b))
        }
    };
}

macro_rules! unary {
    ($name:ident, $variant:ident) => {
        pub fn $name(&mut self, a: NodeId) -> NodeId {
            self.push(Op::$variant(a))
        }
    };
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

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(op.operands().iter().all(|o| o.0 < id.0));
        self.nodes.push(Node { op, value: None });
        id
    }

    fn push_leaf(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Placeholder that must be bound with [`Graph::bind`] before evaluation.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push_leaf(Op::Input(name.into()), None)
    }

    /// Trainable leaf; [`Graph::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Param, Some(value))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Const, Some(value))
    }

    /// Binds (or rebinds) the value of an input or parameter leaf.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(id.0).ok_or(GraphError::UnknownNode(id))?;
        match node.op {
            Op::Input(_) | Op::Param => {
                node.value = Some(value);
                self.invalidate_after(id);
                Ok(())
            }
            _ => Err(GraphError::NotALeaf(id)),
        }
    }

    fn invalidate_after(&mut self, id: NodeId) {
        for node in &mut self.nodes[id.0 + 1..] {
            if !matches!(node.op, Op::Input(_) | Op::Param | Op::Const) {
                node.value = None;
            }
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, _)| NodeId(i))
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes
            .get(id.0)
            .is_some_and(|n| matches!(n.op, Op::Param))
    }

    /// Cached value, if the node has been evaluated (or is a bound leaf).
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    binary!(add, Add);
    binary!(sub, Sub);
    binary!(mul, Mul);
    binary!(add_row, AddRow);
    binary!(sub_row, SubRow);
    binary!(matmul, MatMul);
    binary!(dot, Dot);
    binary!(cosine, Cosine);
    binary!(concat_rows, ConcatRows);
    unary!(relu, Relu);
    unary!(exp, Exp);
    unary!(log, Log);
    unary!(sigmoid, Sigmoid);
    unary!(softplus, Softplus);
    unary!(sum, Sum);
    unary!(mean, Mean);
    unary!(mean_rows, MeanRows);
    unary!(l2_norm, L2Norm);
    unary!(row_norms, RowNorms);
    unary!(softmax, Softmax);
    unary!(log_softmax, LogSoftmax);

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(a, rows))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> NodeId {
        self.push(Op::GradReverse(a, lambda))
    }

    /// Evaluates `id` and everything it depends on, returning the cached value.
    pub fn forward(&mut self, id: NodeId) -> Result<&Tensor, GraphError> {
        if id.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(id));
        }
        let mut needed = vec![false; id.0 + 1];
        needed[id.0] = true;
        for i in (0..=id.0).rev() {
            if needed[i] && self.nodes[i].value.is_none() {
                for o in self.nodes[i].op.operands() {
                    needed[o.0] = true;
                }
            }
        }
        for i in (0..=id.0).filter(|&i| needed[i]) {
            if self.nodes[i].value.is_some() {
                continue;
            }
            let value = self.eval_node(NodeId(i))?;
            self.nodes[i].value = Some(value);
        }
        Ok(self.nodes[id.0].value.as_ref().expect("evaluated above"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("operands are evaluated before consumers")
    }

    fn eval_node(&self, id: NodeId) -> Result<Tensor, GraphError> {
        let op = &self.nodes[id.0].op;
        let name = op.name();
        let out = match *op {
            Op::Input(ref label) => {
                return Err(GraphError::MissingInput {
                    node: id,
                    name: label.clone(),
                })
            }
            Op::Param | Op::Const => unreachable!("leaves carry their value"),
            Op::Add(a, b) => {
                let (a, b) = self.same_shape(name, a, b)?;
                a.zip_map(b, |x, y| x + y)
            }
            Op::Sub(a, b) => {
                let (a, b) = self.same_shape(name, a, b)?;
                a.zip_map(b, |x, y| x - y)
            }
            Op::Mul(a, b) => {
                let (a, b) = self.same_shape(name, a, b)?;
                a.zip_map(b, |x, y| x * y)
            }
            Op::Scale(a, c) => self.val(a).map(|x| c * x),
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                let (a, b) = (self.val(a), self.val(b));
                if a.rank() != 2 || b.rank() != 1 || a.cols() != b.len() {
                    return Err(shape_err(name, a, b));
                }
                let cols = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + sign * b.data()[i % cols])
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err(name, a, b));
                }
                matmul(a, b, false, false)
            }
            Op::Relu(a) => self.val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Exp(a) => self.val(a).map(f64::exp),
            Op::Log(a) => {
                let a = self.val(a);
                if let Some(bad) = a.data().iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
                    return Err(GraphError::Domain {
                        op: name,
                        detail: format!("log of {bad}"),
                    });
                }
                a.map(f64::ln)
            }
            Op::Sigmoid(a) => self.val(a).map(sigmoid),
            Op::Softplus(a) => self.val(a).map(softplus),
            Op::Sum(a) => Tensor::scalar(self.val(a).data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(a);
                if a.is_empty() {
                    return Err(GraphError::Domain {
                        op: name,
                        detail: "mean of empty tensor".into(),
                    });
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::MeanRows(a) => {
                let a = self.val(a);
                if a.rank() != 2 || a.rows() == 0 {
                    return Err(GraphError::Domain {
                        op: name,
                        detail: format!("needs a non-empty matrix, got {:?}", a.shape()),
                    });
                }
                let n = a.rows() as f64;
                let mut out = vec![0.0; a.cols()];
                for r in 0..a.rows() {
                    for (o, x) in out.iter_mut().zip(a.row(r)) {
                        *o += x;
                    }
                }
                Tensor::vector(out.into_iter().map(|s| s / n).collect())
            }
            Op::L2Norm(a) => Tensor::scalar(norm(self.val(a).data())),
            Op::RowNorms(a) => {
                let a = self.val(a);
                if a.rank() != 2 {
                    return Err(GraphError::Domain {
                        op: name,
                        detail: format!("needs a matrix, got {:?}", a.shape()),
                    });
                }
                Tensor::vector((0..a.rows()).map(|r| norm(a.row(r))).collect())
            }
            Op::Dot(a, b) => {
                let (a, b) = self.same_shape(name, a, b)?;
                Tensor::scalar(dot(a.data(), b.data()))
            }
            Op::Softmax(a) => {
                let a = self.val(a);
                let mut out = a.clone();
                rowwise(&mut out, softmax_in_place);
                out
            }
            Op::LogSoftmax(a) => {
                let a = self.val(a);
                let mut out = a.clone();
                rowwise(&mut out, log_softmax_in_place);
                out
            }
            Op::Cosine(a, b) => {
                let (a, b) = self.same_shape(name, a, b)?;
                let rows = if a.rank() == 2 { a.rows() } else { 1 };
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    let (x, y) = if a.rank() == 2 {
                        (a.row(r), b.row(r))
                    } else {
                        (a.data(), b.data())
                    };
                    let (nx, ny) = (norm(x), norm(y));
                    if nx == 0.0 || ny == 0.0 {
                        return Err(GraphError::Domain {
                            op: name,
                            detail: format!("zero-norm operand in row {r}"),
                        });
                    }
                    out.push((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0));
                }
                if a.rank() == 2 {
                    Tensor::vector(out)
                } else {
                    Tensor::scalar(out[0])
                }
            }
            Op::GatherRows(a, ref rows) => {
                let a = self.val(a);
                if a.rank() != 2 {
                    return Err(GraphError::Domain {
                        op: name,
                        detail: format!("needs a matrix, got {:?}", a.shape()),
                    });
                }
                if let Some(&bad) = rows.iter().find(|&&r| r >= a.rows()) {
                    return Err(GraphError::Domain {
                        op: name,
                        detail: format!("row {bad} out of range for {:?}", a.shape()),
                    });
                }
                a.select_rows(rows)
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(shape_err(name, a, b));
                }
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                Tensor::matrix(a.rows() + b.rows(), a.cols(), data)?
            }
            Op::GradReverse(a, _) => self.val(a).clone(),
        };
        Ok(out)
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(&Tensor, &Tensor), GraphError> {
        let (a, b) = (self.val(a), self.val(b));
        if a.shape() != b.shape() {
            return Err(shape_err(op, a, b));
        }
        Ok((a, b))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Every node at or before `loss` is visited once, in reverse order.
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, GraphError> {
        let shape = self.forward(loss)?.shape().to_vec();
        if !shape.is_empty() {
            return Err(GraphError::Rank(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i].op;
            if matches!(op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            for (operand, contrib) in self.local_grads(NodeId(i), &g) {
                match &mut grads[operand.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut out = BTreeMap::new();
        for id in self.parameters().collect::<Vec<_>>() {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.val(id).shape()));
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, id: NodeId, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let y = self.val(id);
        match self.nodes[id.0].op {
            Op::Input(_) | Op::Param | Op::Const => vec![],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (a, g.zip_map(self.val(b), |x, y| x * y)),
                (b, g.zip_map(self.val(a), |x, y| x * y)),
            ],
            Op::Scale(a, c) => vec![(a, g.map(|x| c * x))],
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(self.nodes[id.0].op, Op::AddRow(..)) {
                    1.0
                } else {
                    -1.0
                };
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for (i, x) in g.data().iter().enumerate() {
                    gb[i % cols] += sign * x;
                }
                vec![(a, g.clone()), (b, Tensor::vector(gb))]
            }
            Op::MatMul(a, b) => vec![
                (a, matmul(g, self.val(b), false, true)),
                (b, matmul(self.val(a), g, true, false)),
            ],
            Op::Relu(a) => vec![(a, g.zip_map(self.val(a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Exp(a) => vec![(a, g.zip_map(y, |g, y| g * y))],
            Op::Log(a) => vec![(a, g.zip_map(self.val(a), |g, x| g / x))],
            Op::Sigmoid(a) => vec![(a, g.zip_map(y, |g, s| g * s * (1.0 - s)))],
            Op::Softplus(a) => vec![(a, g.zip_map(self.val(a), |g, x| g * sigmoid(x)))],
            Op::Sum(a) => vec![(a, Tensor::full(self.val(a).shape(), g.item()))],
            Op::Mean(a) => {
                let av = self.val(a);
                vec![(a, Tensor::full(av.shape(), g.item() / av.len() as f64))]
            }
            Op::MeanRows(a) => {
                let av = self.val(a);
                let n = av.rows() as f64;
                let mut out = Tensor::zeros(av.shape());
                let cols = av.cols();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = g.data()[i % cols] / n;
                }
                vec![(a, out)]
            }
            Op::L2Norm(a) => {
                let av = self.val(a);
                let n = y.item();
                let scale = if n > 0.0 { g.item() / n } else { 0.0 };
                vec![(a, av.map(|x| scale * x))]
            }
            Op::RowNorms(a) => {
                let av = self.val(a);
                let cols = av.cols();
                let mut out = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let n = y.data()[r];
                    let scale = if n > 0.0 { g.data()[r] / n } else { 0.0 };
                    for c in 0..cols {
                        out.data_mut()[r * cols + c] = scale * av.data()[r * cols + c];
                    }
                }
                vec![(a, out)]
            }
            Op::Dot(a, b) => {
                let s = g.item();
                vec![
                    (a, self.val(b).map(|x| s * x)),
                    (b, self.val(a).map(|x| s * x)),
                ]
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut out = g.clone();
                for (go, yr) in out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let gy = dot(go, yr);
                    for (o, &p) in go.iter_mut().zip(yr) {
                        *o = p * (*o - gy);
                    }
                }
                vec![(a, out)]
            }
            Op::LogSoftmax(a) => {
                let cols = y.cols();
                let mut out = g.clone();
                for (go, yr) in out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let total: f64 = go.iter().sum();
                    for (o, &lp) in go.iter_mut().zip(yr) {
                        *o -= lp.exp() * total;
                    }
                }
                vec![(a, out)]
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                let cols = av.cols();
                let rows = av.len() / cols.max(1);
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (x, z) = (&av.data()[span.clone()], &bv.data()[span.clone()]);
                    let (nx, nz) = (norm(x), norm(z));
                    let s = dot(x, z) / (nx * nz);
                    let up = g.data()[r];
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] =
                            up * (z[c] / (nx * nz) - s * x[c] / (nx * nx));
                        gb.data_mut()[r * cols + c] =
                            up * (x[c] / (nx * nz) - s * z[c] / (nz * nz));
                    }
                }
                vec![(a, ga), (b, gb)]
            }
            Op::GatherRows(a, ref rows) => {
                let av = self.val(a);
                let cols = av.cols();
                let mut out = Tensor::zeros(av.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        out.data_mut()[r * cols + c] += g.data()[k * cols + c];
                    }
                }
                vec![(a, out)]
            }
            Op::ConcatRows(a, b) => {
                let split = self.val(a).len();
                let ga = Tensor::new(self.val(a).shape().to_vec(), g.data()[..split].to_vec());
                let gb = Tensor::new(self.val(b).shape().to_vec(), g.data()[split..].to_vec());
                vec![
                    (a, ga.expect("shape checked in forward")),
                    (b, gb.expect("shape checked in forward")),
                ]
            }
            Op::GradReverse(a, lambda) => vec![(a, g.map(|x| -lambda * x))],
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GraphError {
    GraphError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn rowwise(t: &mut Tensor, f: fn(&mut [f64])) {
    let cols = t.cols().max(1);
    for row in t.data_mut().chunks_mut(cols) {
        f(row);
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// `op(a) · op(b)` for row-major matrices, with optional transposition.
fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if x == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += x * bd[j * bc + p];
                }
            } else {
                for (o, y) in row.iter_mut().zip(&bd[p * bc..(p + 1) * bc]) {
                    *o += x * y;
                }
            }
        }
    }
    Tensor::matrix(m, n, out).expect("dimensions computed above")
}
