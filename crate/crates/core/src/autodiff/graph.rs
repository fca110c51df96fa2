use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of operation kinds the engine differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    MatMul,
    Add,
    Mul,
    Relu,
    LayerNorm,
    Softmax,
    Embedding,
    CrossEntropy,
    SumSquares,
    Slice,
    Concat,
    Scale,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Input,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::SumSquares,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Softmax => "softmax",
            OpKind::Embedding => "embedding-lookup",
            OpKind::CrossEntropy => "cross-entropy",
            OpKind::SumSquares => "sum-squares",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::Scale => "scale",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input { name: String },
    /// `a · b`, or `a · bᵀ` when `transpose_rhs`.
    MatMul { transpose_rhs: bool },
    Add,
    Mul,
    Relu,
    /// Row-wise normalization of `[n, d]` scaled by a `[d]` gain.
    LayerNorm { eps: f64 },
    /// Row-wise softmax; `causal` zeroes entries above the diagonal.
    Softmax { causal: bool },
    Embedding { indices: Vec<usize> },
    /// Mean over rows of `-log softmax(logits)[target]`.
    CrossEntropy { targets: Vec<usize> },
    SumSquares,
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Scale { factor: f64 },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Relu => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SumSquares => OpKind::SumSquares,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Scale { .. } => OpKind::Scale,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// Source of values for a graph's named inputs.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<B: Bindings + ?Sized> Bindings for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Chains two binding sources; the first one wins on name collisions.
pub struct Layered<'a, A: ?Sized, B: ?Sized>(pub &'a A, pub &'a B);

impl<A: Bindings + ?Sized, B: Bindings + ?Sized> Bindings for Layered<'_, A, B> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// Gradients of a scalar root with respect to every differentiable input.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_id: BTreeMap<NodeId, Tensor>,
    names: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_id.get(&id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.by_id.get(id))
    }

    /// `(input name, gradient)` in name order.
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(move |(n, id)| (n.as_str(), &self.by_id[id]))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.names.get(name)?;
        self.by_id.get_mut(id)
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        self.names
            .into_iter()
            .filter_map(|(n, id)| self.by_id.remove(&id).map(|t| (n, t)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Replaces every gradient with zeros of the same shape.
    pub fn zero_all(&mut self) {
        self.by_id.values_mut().for_each(|t| t.fill(0.0));
    }

    pub fn global_norm(&self) -> f64 {
        self.by_id
            .values()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }
}

/// A define-then-run computation graph.
///
/// Nodes are appended in topological order; [`Graph::forward`] evaluates them
/// in insertion order and [`Graph::backward`] walks them in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    inputs: BTreeMap<String, NodeId>,
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

    fn push(&mut self, op: Op, parents: Vec<NodeId>) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(op, parents, requires_grad)
    }

    fn push_with(&mut self, op: Op, parents: Vec<NodeId>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            requires_grad,
        });
        self.values.push(None);
        id
    }

    /// Declares a named input. Re-declaring a name returns the existing node.
    pub fn input(&mut self, name: &str, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            self.nodes[id.0].requires_grad |= requires_grad;
            return id;
        }
        let id = self.push_with(
            Op::Input {
                name: name.to_owned(),
            },
            Vec::new(),
            requires_grad,
        );
        self.inputs.insert(name.to_owned(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(
            Op::MatMul {
                transpose_rhs: false,
            },
            vec![a, b],
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(
            Op::MatMul {
                transpose_rhs: true,
            },
            vec![a, b],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![x, gain])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax { causal: false }, vec![x])
    }

    pub fn causal_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax { causal: true }, vec![x])
    }

    pub fn embedding(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { indices }, vec![table])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::CrossEntropy { targets }, vec![logits])
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumSquares, vec![x])
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { axis, start, end }, vec![x])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { factor }, vec![x])
    }

    /// `a - b`, built from `add` and `scale`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Evaluates every node in insertion order and returns the value of the
    /// last node.
    pub fn forward(&mut self, bindings: &impl Bindings) -> Result<&Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("cannot evaluate an empty graph".into()));
        }
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, bindings)?;
            self.values[i] = Some(value);
        }
        Ok(self.values.last().unwrap().as_ref().unwrap())
    }

    fn eval_node(&self, i: usize, bindings: &impl Bindings) -> Result<Tensor> {
        let node = &self.nodes[i];
        let arg = |k: usize| -> &Tensor { self.values[node.parents[k].0].as_ref().unwrap() };
        match &node.op {
            Op::Input { name } => bindings
                .lookup(name)
                .cloned()
                .ok_or_else(|| Error::Graph(format!("input `{name}` is not bound"))),
            Op::MatMul { transpose_rhs } => kernels::matmul(arg(0), arg(1), *transpose_rhs),
            Op::Add => kernels::zip("add", arg(0), arg(1), |a, b| a + b),
            Op::Mul => kernels::zip("mul", arg(0), arg(1), |a, b| a * b),
            Op::Relu => Ok(kernels::map(arg(0), |v| v.max(0.0))),
            Op::LayerNorm { eps } => kernels::layer_norm(arg(0), arg(1), *eps),
            Op::Softmax { causal } => kernels::softmax(arg(0), *causal),
            Op::Embedding { indices } => kernels::embedding(arg(0), indices),
            Op::CrossEntropy { targets } => kernels::cross_entropy(arg(0), targets),
            Op::SumSquares => Ok(Tensor::scalar(arg(0).sum_squares())),
            Op::Slice { axis, start, end } => kernels::slice(arg(0), *axis, *start, *end),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor> = (0..node.parents.len()).map(arg).collect();
                kernels::concat(&parts, *axis)
            }
            Op::Scale { factor } => Ok(kernels::map(arg(0), |v| v * factor)),
        }
    }

    /// Reverse-mode pass from a scalar `root`. Requires a completed forward.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {root:?}")));
        }
        if self.values.iter().any(Option::is_none) {
            return Err(Error::Graph(
                "graph has not been evaluated; run forward first".into(),
            ));
        }
        let root_value = self.values[root.0].as_ref().unwrap();
        if !root_value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Input { .. }) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let contributions = self.node_vjp(i, &upstream)?;
            for (parent, grad) in node.parents.iter().zip(contributions) {
                let Some(grad) = grad else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            grads[i] = Some(upstream);
        }

        let mut out = Gradients::default();
        for (name, &id) in &self.inputs {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let grad = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.values[id.0].as_ref().unwrap().shape()));
            out.by_id.insert(id, grad);
            out.names.insert(name.clone(), id);
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each parent of node `i`.
    fn node_vjp(&self, i: usize, dy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[i];
        let val = |k: usize| -> &Tensor { self.values[node.parents[k].0].as_ref().unwrap() };
        let wants = |k: usize| self.nodes[node.parents[k].0].requires_grad;
        let out = self.values[i].as_ref().unwrap();
        Ok(match &node.op {
            Op::Input { .. } => Vec::new(),
            Op::MatMul { transpose_rhs } => {
                let (a, b) = (val(0), val(1));
                let da = wants(0)
                    .then(|| kernels::matmul(dy, b, !transpose_rhs))
                    .transpose()?;
                let db = if !wants(1) {
                    None
                } else if *transpose_rhs {
                    // c = a bᵀ  =>  db = dyᵀ a
                    Some(kernels::matmul_tn(dy, a)?)
                } else {
                    // c = a b  =>  db = aᵀ dy
                    Some(kernels::matmul_tn(a, dy)?)
                };
                vec![da, db]
            }
            Op::Add => vec![
                wants(0).then(|| dy.clone()),
                wants(1).then(|| dy.clone()),
            ],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    wants(0)
                        .then(|| kernels::zip("mul", dy, b, |g, y| g * y))
                        .transpose()?,
                    wants(1)
                        .then(|| kernels::zip("mul", dy, a, |g, x| g * x))
                        .transpose()?,
                ]
            }
            Op::Relu => vec![Some(kernels::zip("relu", dy, val(0), |g, x| {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            })?)],
            Op::LayerNorm { eps } => {
                let (dx, dgain) = kernels::layer_norm_vjp(val(0), val(1), *eps, dy);
                vec![wants(0).then_some(dx), wants(1).then_some(dgain)]
            }
            Op::Softmax { .. } => vec![Some(kernels::softmax_vjp(out, dy))],
            Op::Embedding { indices } => {
                vec![Some(kernels::embedding_vjp(val(0).shape(), indices, dy))]
            }
            Op::CrossEntropy { targets } => {
                vec![Some(kernels::cross_entropy_vjp(val(0), targets, dy.data()[0]))]
            }
            Op::SumSquares => {
                let g = 2.0 * dy.data()[0];
                vec![Some(kernels::map(val(0), |v| g * v))]
            }
            Op::Slice { axis, start, .. } => {
                vec![Some(kernels::slice_vjp(val(0).shape(), *axis, *start, dy))]
            }
            Op::Concat { axis } => {
                let shapes: Vec<&[usize]> =
                    (0..node.parents.len()).map(|k| val(k).shape()).collect();
                kernels::concat_vjp(&shapes, *axis, dy)
                    .into_iter()
                    .enumerate()
                    .map(|(k, g)| wants(k).then_some(g))
                    .collect()
            }
            Op::Scale { factor } => vec![Some(kernels::map(dy, |g| g * factor))],
        })
    }

    /// Current values of every input node, keyed by name.
    pub fn bound_inputs(&self) -> Result<BTreeMap<String, Tensor>> {
        self.inputs
            .iter()
            .map(|(name, id)| {
                self.values[id.0]
                    .clone()
                    .map(|v| (name.clone(), v))
                    .ok_or_else(|| Error::Graph("graph has not been evaluated".into()))
            })
            .collect()
    }

    /// Scalar value of `root` after re-evaluating the graph under `bindings`.
    pub fn eval_scalar(&mut self, bindings: &impl Bindings, root: NodeId) -> Result<f64> {
        self.forward(bindings)?;
        self.values[root.0]
            .as_ref()
            .and_then(Tensor::item)
            .ok_or_else(|| Error::Graph("root is not scalar".into()))
    }
}
