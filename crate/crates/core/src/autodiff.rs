//! Reverse-mode differentiation over a small fixed set of tensor primitives.
//!
//! A [`Graph`] is recorded once by calling the builder methods (each returns
//! the [`NodeId`] of the new node) and can then be evaluated any number of
//! times against different leaf bindings. Leaves are placeholders declared
//! with a shape; constants are baked into the graph. Node ids are handed out
//! in push order, so the node list is always a valid topological order.
//!
//! ```
//! use toxscope::autodiff::{evaluate_with_gradient, Graph};
//! use toxscope::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf("x", &[2]);
//! let sq = g.mul(x.node(), x.node());
//! let out = g.sum(sq);
//! g.set_output(out);
//!
//! let value = Tensor::vector(vec![1.0, 2.0]);
//! let (y, grads) = evaluate_with_gradient(&g, &[&value], &[x]).unwrap();
//! assert_eq!(y, 5.0);
//! assert_eq!(grads[0].data(), &[2.0, 4.0]);
//! ```

use std::fmt;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a declared leaf. Leaf values are bound positionally, in
/// declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LeafId {
    ordinal: usize,
    node: NodeId,
}

impl LeafId {
    pub fn ordinal(self) -> usize {
        self.ordinal
    }

    pub fn node(self) -> NodeId {
        self.node
    }
}

/// Identifies a node in error messages: its index and op kind.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRef {
    pub index: usize,
    pub op: &'static str,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node #{} ({})", self.index, self.op)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("{node}: shape mismatch: {detail}")]
    Shape { node: NodeRef, detail: String },
    #[error("{node}: non-finite value produced")]
    NonFinite { node: NodeRef },
    #[error("{node}: index out of range: {detail}")]
    Index { node: NodeRef, detail: String },
    #[error("{node}: empty input (no unmasked positions)")]
    EmptyInput { node: NodeRef },
    #[error("{node}: refers to node #{input}, which is not an earlier node")]
    BadReference { node: NodeRef, input: usize },
    #[error("expected {expected} leaf bindings, got {actual}")]
    BindingCount { expected: usize, actual: usize },
    #[error("leaf `{name}` declared with shape {expected:?}, bound to shape {actual:?}")]
    LeafShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("leaf `{name}` bound to a non-finite value")]
    NonFiniteLeaf { name: String },
    #[error("graph has no output node")]
    NoOutput,
    #[error("output {node} is not a scalar (shape {shape:?})")]
    NonScalarOutput { node: NodeRef, shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(usize),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    MaskedMeanPool {
        x: NodeId,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    Select {
        x: NodeId,
        index: usize,
    },
    Sum(NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::MaskedMeanPool { .. } => "masked_mean_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Select { .. } => "select",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::SliceCols { x, .. }
            | Op::MaskedMeanPool { x, .. }
            | Op::Select { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct LeafDecl {
    name: String,
    shape: Vec<usize>,
}

/// A recorded computation: primitive-op nodes in topological order, the
/// declared leaves, and an optional designated output.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    leaves: Vec<LeafDecl>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_name(&self, leaf: LeafId) -> &str {
        &self.leaves[leaf.ordinal].name
    }

    pub fn leaf_shape(&self, leaf: LeafId) -> &[usize] {
        &self.leaves[leaf.ordinal].shape
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef {
            index: id,
            op: self.ops[id].name(),
        }
    }

    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> LeafId {
        let ordinal = self.leaves.len();
        let node = self.push(Op::Leaf(ordinal));
        self.leaves.push(LeafDecl {
            name: name.into(),
            shape: shape.to_vec(),
        });
        LeafId { ordinal, node }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    /// `[n,k] x [k,m] -> [n,m]`; a rank-1 left operand `[k]` gives `[m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `[m]` vector to every row of `x` (last axis `m`).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm {
            x,
            gain,
            shift,
            eps,
        })
    }

    /// Stacks rows `ids` of a `[V,d]` table into `[ids.len(), d]`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Gather { table, ids })
    }

    /// Mean of the rows of `[n,d]` where `mask` is set, giving `[d]`.
    pub fn masked_mean_pool(&mut self, x: NodeId, mask: Vec<bool>) -> NodeId {
        self.push(Op::MaskedMeanPool { x, mask })
    }

    /// `-log softmax(logits)[target]` for rank-1 logits.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        self.push(Op::CrossEntropy { logits, target })
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select(&mut self, x: NodeId, index: usize) -> NodeId {
        self.push(Op::Select { x, index })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }

    /// Runs the forward pass. `leaves` are bound in declaration order.
    pub fn evaluate<'g>(&'g self, leaves: &[&'g Tensor]) -> Result<Evaluation<'g>, GraphError> {
        if leaves.len() != self.leaves.len() {
            return Err(GraphError::BindingCount {
                expected: self.leaves.len(),
                actual: leaves.len(),
            });
        }
        for (decl, value) in self.leaves.iter().zip(leaves) {
            if decl.shape != value.shape() {
                return Err(GraphError::LeafShape {
                    name: decl.name.clone(),
                    expected: decl.shape.clone(),
                    actual: value.shape().to_vec(),
                });
            }
            if !value.is_finite() {
                return Err(GraphError::NonFiniteLeaf {
                    name: decl.name.clone(),
                });
            }
        }

        let mut eval = Evaluation {
            graph: self,
            leaves: leaves.to_vec(),
            values: Vec::with_capacity(self.ops.len()),
        };
        for (id, op) in self.ops.iter().enumerate() {
            for input in op.inputs() {
                if input.0 >= id {
                    return Err(GraphError::BadReference {
                        node: self.node_ref(id),
                        input: input.0,
                    });
                }
            }
            let value = match op {
                Op::Leaf(_) => None,
                Op::Constant(t) => {
                    if !t.is_finite() {
                        return Err(GraphError::NonFinite {
                            node: self.node_ref(id),
                        });
                    }
                    None
                }
                _ => {
                    let v = eval.forward_op(id, op)?;
                    if !v.is_finite() {
                        return Err(GraphError::NonFinite {
                            node: self.node_ref(id),
                        });
                    }
                    Some(v)
                }
            };
            eval.values.push(value);
        }
        Ok(eval)
    }
}

/// Forward values of one graph evaluation.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    leaves: Vec<&'g Tensor>,
    values: Vec<Option<Tensor>>,
}

fn shape_err(node: NodeRef, detail: impl Into<String>) -> GraphError {
    GraphError::Shape {
        node,
        detail: detail.into(),
    }
}

impl<'g> Evaluation<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.graph.ops[id.0] {
            Op::Leaf(ordinal) => self.leaves[*ordinal],
            Op::Constant(t) => t,
            _ => self.values[id.0]
                .as_ref()
                .expect("node evaluated in topological order"),
        }
    }

    /// The designated output's value.
    pub fn output(&self) -> Result<&Tensor, GraphError> {
        let out = self.graph.output.ok_or(GraphError::NoOutput)?;
        Ok(self.value(out))
    }

    fn forward_op(&self, id: usize, op: &Op) -> Result<Tensor, GraphError> {
        let node = || self.graph.node_ref(id);
        match op {
            Op::Leaf(_) | Op::Constant(_) => unreachable!("handled by caller"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.value(*a), self.value(*b));
                let (n, k, out_shape) = match a.shape() {
                    [k] => (1, *k, None),
                    [n, k] => (*n, *k, Some(*n)),
                    s => return Err(shape_err(node(), format!("left operand has shape {s:?}"))),
                };
                let m = match b.shape() {
                    [kb, m] if *kb == k => *m,
                    s => {
                        return Err(shape_err(
                            node(),
                            format!("cannot multiply {:?} by {s:?}", a.shape()),
                        ))
                    }
                };
                let data = matmul_kernel(a.data(), b.data(), n, k, m);
                let shape = match out_shape {
                    Some(n) => vec![n, m],
                    None => vec![m],
                };
                Ok(Tensor::new(shape, data).expect("matmul output length"))
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.value(*a), self.value(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(
                        node(),
                        format!("operands {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let f: fn(f64, f64) -> f64 = if matches!(op, Op::Add(..)) {
                    |x, y| x + y
                } else {
                    |x, y| x * y
                };
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Ok(Tensor::new(a.shape().to_vec(), data).expect("same shape"))
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (self.value(*x), self.value(*bias));
                if x.rank() == 0 || bias.shape() != [x.last_dim()] {
                    return Err(shape_err(
                        node(),
                        format!(
                            "bias {:?} does not fit rows of {:?}",
                            bias.shape(),
                            x.shape()
                        ),
                    ));
                }
                let mut out = x.clone();
                let w = x.last_dim();
                for row in out.data_mut().chunks_mut(w) {
                    for (v, b) in row.iter_mut().zip(bias.data()) {
                        *v += b;
                    }
                }
                Ok(out)
            }
            Op::Relu(x) => Ok(self.value(*x).map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Softmax(x) => {
                let x = self.value(*x);
                if x.rank() == 0 {
                    return Err(shape_err(node(), "softmax needs rank >= 1"));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(x.last_dim()) {
                    softmax_in_place(row);
                }
                Ok(out)
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
            } => {
                let (x, gain, shift) = (self.value(*x), self.value(*gain), self.value(*shift));
                let d = x.last_dim();
                if x.rank() == 0 || gain.shape() != [d] || shift.shape() != [d] {
                    return Err(shape_err(
                        node(),
                        format!(
                            "input {:?} with gain {:?} and shift {:?}",
                            x.shape(),
                            gain.shape(),
                            shift.shape()
                        ),
                    ));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(d) {
                    let (mean, inv_std) = row_moments(row, *eps);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean) * inv_std * gain.data()[j] + shift.data()[j];
                    }
                }
                Ok(out)
            }
            Op::Gather { table, ids } => {
                let table = self.value(*table);
                let [vocab, d] = table.shape() else {
                    return Err(shape_err(
                        node(),
                        format!("table must be rank 2, got {:?}", table.shape()),
                    ));
                };
                let (vocab, d) = (*vocab, *d);
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= vocab {
                        return Err(GraphError::Index {
                            node: node(),
                            detail: format!("id {id} outside table of {vocab} rows"),
                        });
                    }
                    data.extend_from_slice(table.row(id));
                }
                Ok(Tensor::new(vec![ids.len(), d], data).expect("gather output length"))
            }
            Op::MaskedMeanPool { x, mask } => {
                let x = self.value(*x);
                let [n, d] = x.shape() else {
                    return Err(shape_err(
                        node(),
                        format!("input must be rank 2, got {:?}", x.shape()),
                    ));
                };
                if mask.len() != *n {
                    return Err(shape_err(
                        node(),
                        format!("mask of length {} for {n} rows", mask.len()),
                    ));
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(GraphError::EmptyInput { node: node() });
                }
                let mut out = vec![0.0; *d];
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (o, v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / count as f64;
                out.iter_mut().for_each(|o| *o *= inv);
                Ok(Tensor::vector(out))
            }
            Op::CrossEntropy { logits, target } => {
                let z = self.value(*logits);
                if z.rank() != 1 {
                    return Err(shape_err(
                        node(),
                        format!("logits must be rank 1, got {:?}", z.shape()),
                    ));
                }
                if *target >= z.len() {
                    return Err(GraphError::Index {
                        node: node(),
                        detail: format!("target {target} for {} classes", z.len()),
                    });
                }
                Ok(Tensor::scalar(log_sum_exp(z.data()) - z.data()[*target]))
            }
            Op::Select { x, index } => {
                let x = self.value(*x);
                if *index >= x.len() {
                    return Err(GraphError::Index {
                        node: node(),
                        detail: format!("index {index} into {} elements", x.len()),
                    });
                }
                Ok(Tensor::scalar(x.data()[*index]))
            }
            Op::Sum(x) => Ok(Tensor::scalar(self.value(*x).sum())),
            Op::Scale(x, factor) => Ok(self.value(*x).map(|v| v * factor)),
            Op::Transpose(x) => {
                let x = self.value(*x);
                let [n, m] = x.shape() else {
                    return Err(shape_err(
                        node(),
                        format!("transpose needs rank 2, got {:?}", x.shape()),
                    ));
                };
                Ok(
                    Tensor::new(vec![*m, *n], transpose_kernel(x.data(), *n, *m))
                        .expect("transpose"),
                )
            }
            Op::SliceCols { x, start, len } => {
                let x = self.value(*x);
                let [n, m] = x.shape() else {
                    return Err(shape_err(
                        node(),
                        format!("slice needs rank 2, got {:?}", x.shape()),
                    ));
                };
                if start + len > *m {
                    return Err(shape_err(
                        node(),
                        format!("columns {start}..{} of {m}", start + len),
                    ));
                }
                let mut data = Vec::with_capacity(n * len);
                for r in 0..*n {
                    data.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                Ok(Tensor::new(vec![*n, *len], data).expect("slice"))
            }
            Op::ConcatCols(parts) => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
                let Some(first) = tensors.first() else {
                    return Err(shape_err(node(), "nothing to concatenate"));
                };
                let n = match first.shape() {
                    [n, _] => *n,
                    s => return Err(shape_err(node(), format!("concat needs rank 2, got {s:?}"))),
                };
                for t in &tensors {
                    if t.rank() != 2 || t.shape()[0] != n {
                        return Err(shape_err(
                            node(),
                            format!(
                                "cannot concatenate {:?} with {:?}",
                                first.shape(),
                                t.shape()
                            ),
                        ));
                    }
                }
                let total: usize = tensors.iter().map(|t| t.shape()[1]).sum();
                let mut data = Vec::with_capacity(n * total);
                for r in 0..n {
                    for t in &tensors {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Ok(Tensor::new(vec![n, total], data).expect("concat"))
            }
        }
    }

    /// Gradients of the (scalar) output with respect to `wrt`, each shaped
    /// like its leaf.
    pub fn gradients(&self, wrt: &[LeafId]) -> Result<Vec<Tensor>, GraphError> {
        let graph = self.graph;
        let out = graph.output.ok_or(GraphError::NoOutput)?;
        let out_value = self.value(out);
        if out_value.len() != 1 || out_value.rank() > 1 {
            return Err(GraphError::NonScalarOutput {
                node: graph.node_ref(out.0),
                shape: out_value.shape().to_vec(),
            });
        }

        // Only nodes downstream of a requested leaf need adjoints.
        let mut needs = vec![false; graph.ops.len()];
        for leaf in wrt {
            needs[leaf.node.0] = true;
        }
        for (id, op) in graph.ops.iter().enumerate() {
            if !needs[id] && op.inputs().iter().any(|i| needs[i.0]) {
                needs[id] = true;
            }
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; graph.ops.len()];
        if needs[out.0] {
            adjoints[out.0] = Some(Tensor::filled(out_value.shape(), 1.0));
        }
        for id in (0..=out.0).rev() {
            let Some(upstream) = adjoints[id].take() else {
                continue;
            };
            let op = &graph.ops[id];
            if let Op::Leaf(_) = op {
                adjoints[id] = Some(upstream);
                continue;
            }
            for (input, grad) in self.backward_op(id, op, &upstream, &needs) {
                match &mut adjoints[input.0] {
                    Some(acc) => acc.axpy(1.0, &grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|leaf| {
                adjoints[leaf.node.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&graph.leaves[leaf.ordinal].shape))
            })
            .collect())
    }

    /// Adjoint contributions of node `id` to each of its inputs that needs one.
    fn backward_op(
        &self,
        id: usize,
        op: &Op,
        dy: &Tensor,
        needs: &[bool],
    ) -> Vec<(NodeId, Tensor)> {
        let want = |n: &NodeId| needs[n.0];
        let y = self.values[id].as_ref();
        let mut grads = Vec::with_capacity(2);
        match op {
            Op::Leaf(_) | Op::Constant(_) => {}
            Op::MatMul(a_id, b_id) => {
                let (a, b) = (self.value(*a_id), self.value(*b_id));
                let k = a.last_dim();
                let n = a.len() / k.max(1);
                let m = b.shape()[1];
                if want(a_id) {
                    // dA = dY . B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let dy_row = &dy.data()[i * m..(i + 1) * m];
                        for p in 0..k {
                            let b_row = &b.data()[p * m..(p + 1) * m];
                            da[i * k + p] = dot(dy_row, b_row);
                        }
                    }
                    grads.push((*a_id, Tensor::new(a.shape().to_vec(), da).expect("dA")));
                }
                if want(b_id) {
                    // dB = A^T . dY
                    let at = transpose_kernel(a.data(), n, k);
                    let db = matmul_kernel(&at, dy.data(), k, n, m);
                    grads.push((*b_id, Tensor::new(b.shape().to_vec(), db).expect("dB")));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    grads.push((*a, dy.clone()));
                }
                if want(b) {
                    grads.push((*b, dy.clone()));
                }
            }
            Op::Mul(a_id, b_id) => {
                let (a, b) = (self.value(*a_id), self.value(*b_id));
                if want(a_id) {
                    grads.push((*a_id, elementwise(dy, b, |g, v| g * v)));
                }
                if want(b_id) {
                    grads.push((*b_id, elementwise(dy, a, |g, v| g * v)));
                }
            }
            Op::AddBias(x, bias) => {
                if want(x) {
                    grads.push((*x, dy.clone()));
                }
                if want(bias) {
                    grads.push((*bias, Tensor::vector(column_sums(dy))));
                }
            }
            Op::Relu(x) => {
                if want(x) {
                    let xv = self.value(*x);
                    grads.push((
                        *x,
                        elementwise(dy, xv, |g, v| if v > 0.0 { g } else { 0.0 }),
                    ));
                }
            }
            Op::Softmax(x) => {
                if want(x) {
                    let y = y.expect("softmax value");
                    let w = y.last_dim();
                    let mut dx = dy.clone();
                    for (dx_row, y_row) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let inner = dot(dx_row, y_row);
                        for (g, p) in dx_row.iter_mut().zip(y_row) {
                            *g = p * (*g - inner);
                        }
                    }
                    grads.push((*x, dx));
                }
            }
            Op::LayerNorm {
                x: x_id,
                gain: g_id,
                shift: s_id,
                eps,
            } => {
                let (x, gain) = (self.value(*x_id), self.value(*g_id));
                let d = x.last_dim();
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (x_row, dy_row)) in x.data().chunks(d).zip(dy.data().chunks(d)).enumerate()
                {
                    let (mean, inv_std) = row_moments(x_row, *eps);
                    for j in 0..d {
                        xhat[j] = (x_row[j] - mean) * inv_std;
                        dxhat[j] = dy_row[j] * gain.data()[j];
                        dgain[j] += dy_row[j] * xhat[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if want(x_id) {
                    grads.push((*x_id, Tensor::new(x.shape().to_vec(), dx).expect("dx")));
                }
                if want(g_id) {
                    grads.push((*g_id, Tensor::vector(dgain)));
                }
                if want(s_id) {
                    grads.push((*s_id, Tensor::vector(column_sums(dy))));
                }
            }
            Op::Gather { table, ids } => {
                if want(table) {
                    let t = self.value(*table);
                    let d = t.shape()[1];
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &dy.data()[r * d..(r + 1) * d];
                        for (acc, g) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *acc += g;
                        }
                    }
                    grads.push((*table, dt));
                }
            }
            Op::MaskedMeanPool { x, mask } => {
                if want(x) {
                    let xv = self.value(*x);
                    let d = xv.shape()[1];
                    let inv = 1.0 / mask.iter().filter(|&&m| m).count() as f64;
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (acc, g) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(dy.data())
                        {
                            *acc = g * inv;
                        }
                    }
                    grads.push((*x, dx));
                }
            }
            Op::CrossEntropy { logits, target } => {
                if want(logits) {
                    let z = self.value(*logits);
                    let mut p = z.data().to_vec();
                    softmax_in_place(&mut p);
                    p[*target] -= 1.0;
                    let g = dy.data()[0];
                    p.iter_mut().for_each(|v| *v *= g);
                    grads.push((*logits, Tensor::vector(p)));
                }
            }
            Op::Select { x, index } => {
                if want(x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    dx.data_mut()[*index] = dy.data()[0];
                    grads.push((*x, dx));
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    grads.push((*x, Tensor::filled(self.value(*x).shape(), dy.data()[0])));
                }
            }
            Op::Scale(x, factor) => {
                if want(x) {
                    grads.push((*x, dy.map(|g| g * factor)));
                }
            }
            Op::Transpose(x) => {
                if want(x) {
                    let [m, n] = dy.shape() else { unreachable!() };
                    let data = transpose_kernel(dy.data(), *m, *n);
                    grads.push((*x, Tensor::new(vec![*n, *m], data).expect("transpose grad")));
                }
            }
            Op::SliceCols { x, start, len } => {
                if want(x) {
                    let xv = self.value(*x);
                    let m = xv.shape()[1];
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, src) in dy.data().chunks(*len).enumerate() {
                        dx.data_mut()[r * m + start..r * m + start + len].copy_from_slice(src);
                    }
                    grads.push((*x, dx));
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.shape()[1];
                let mut offset = 0;
                for part in parts {
                    let pv = self.value(*part);
                    let w = pv.shape()[1];
                    if want(part) {
                        let mut data = Vec::with_capacity(pv.len());
                        for row in dy.data().chunks(total) {
                            data.extend_from_slice(&row[offset..offset + w]);
                        }
                        grads.push((
                            *part,
                            Tensor::new(pv.shape().to_vec(), data).expect("concat grad"),
                        ));
                    }
                    offset += w;
                }
            }
        }
        grads
    }
}

/// Evaluates `graph` and returns its scalar output together with the
/// gradient for each leaf in `wrt`.
pub fn evaluate_with_gradient(
    graph: &Graph,
    leaves: &[&Tensor],
    wrt: &[LeafId],
) -> Result<(f64, Vec<Tensor>), GraphError> {
    let eval = graph.evaluate(leaves)?;
    let output = scalar_output(graph, &eval)?;
    let grads = eval.gradients(wrt)?;
    Ok((output, grads))
}

fn scalar_output(graph: &Graph, eval: &Evaluation<'_>) -> Result<f64, GraphError> {
    let out = graph.output.ok_or(GraphError::NoOutput)?;
    let value = eval.value(out);
    match (value.rank(), value.item()) {
        (0 | 1, Some(v)) => Ok(v),
        _ => Err(GraphError::NonScalarOutput {
            node: graph.node_ref(out.0),
            shape: value.shape().to_vec(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_rel_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_coordinate: usize,
    pub step_size: f64,
}

/// Compares the analytic gradient for `wrt` with central differences
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
pub fn finite_difference_check(
    graph: &Graph,
    leaves: &[&Tensor],
    wrt: LeafId,
    step: f64,
) -> Result<GradCheckReport, GraphError> {
    let (_, grads) = evaluate_with_gradient(graph, leaves, &[wrt])?;
    check_gradient_against(graph, leaves, wrt, &grads[0], step)
}

/// Same as [`finite_difference_check`] but against a caller-supplied
/// gradient, which lets a known-bad gradient be fed through the checker.
pub fn check_gradient_against(
    graph: &Graph,
    leaves: &[&Tensor],
    wrt: LeafId,
    analytic: &Tensor,
    step: f64,
) -> Result<GradCheckReport, GraphError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GraphError::BadStep(step));
    }
    let base = leaves.get(wrt.ordinal).ok_or(GraphError::BindingCount {
        expected: graph.leaf_count(),
        actual: leaves.len(),
    })?;
    if analytic.shape() != base.shape() {
        return Err(GraphError::LeafShape {
            name: graph.leaf_name(wrt).to_string(),
            expected: base.shape().to_vec(),
            actual: analytic.shape().to_vec(),
        });
    }

    let eval_at = |probe: &Tensor| -> Result<f64, GraphError> {
        let mut bindings = leaves.to_vec();
        bindings[wrt.ordinal] = probe;
        scalar_output(graph, &graph.evaluate(&bindings)?)
    };
    let mut probe = (*base).clone();
    let mut report = GradCheckReport {
        max_abs_rel_error: 0.0,
        worst_coordinate: 0,
        step_size: step,
    };
    for i in 0..base.len() {
        let x0 = base.data()[i];
        probe.data_mut()[i] = x0 + step;
        let plus = eval_at(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let minus = eval_at(&probe)?;
        probe.data_mut()[i] = x0;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > report.max_abs_rel_error {
            report.max_abs_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

fn transpose_kernel(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(x: &Tensor) -> Vec<f64> {
    let w = x.last_dim();
    let mut out = vec![0.0; w];
    for row in x.data().chunks(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Population mean and `1/sqrt(var + eps)` of one row.
fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
