//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are created in topological order, so the graph is acyclic by
//! construction and the backward pass is a single reverse sweep.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    ChannelContract(NodeId, NodeId),
    TransposedConv2d(NodeId, NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    SoftmaxRows(NodeId),
    SqL2Diff(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Stack(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::ChannelContract(..) => "channel_contract",
            Op::TransposedConv2d(..) => "transposed_conv2d",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::MaxPool { .. } => "max_pool",
            Op::SoftmaxRows(..) => "softmax",
            Op::SqL2Diff(..) => "sq_l2_diff",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Stack(..) => "stack",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Computation graph. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeSet<NodeId>,
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.params.contains(&id)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(id);
        id
    }

    /// Frozen leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn channel_contract(&mut self, c: NodeId, d: NodeId) -> Result<NodeId> {
        let v = ops::channel_contract(self.value(c), self.value(d))?;
        Ok(self.push(Op::ChannelContract(c, d), v, &[c, d]))
    }

    pub fn transposed_conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = ops::transposed_conv2d(self.value(input), self.value(kernel))?;
        Ok(self.push(Op::TransposedConv2d(input, kernel), v, &[input, kernel]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_row(self.value(a), self.value(bias))?;
        Ok(self.push(Op::AddRow(a, bias), v, &[a, bias]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = ops::scale(self.value(a), factor);
        self.push(Op::Scale(a, factor), v, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = ops::relu(self.value(a));
        self.push(Op::Relu(a), v, &[a])
    }

    /// Max-pool consecutive groups of `group` rows; see [`ops::max_pool_groups`].
    pub fn max_pool_groups(&mut self, input: NodeId, group: usize) -> Result<NodeId> {
        let (v, argmax) = ops::max_pool_groups(self.value(input), group)?;
        Ok(self.push(Op::MaxPool { input, argmax }, v, &[input]))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v, &[a]))
    }

    pub fn sq_l2_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::sq_l2_diff(self.value(a), self.value(b))?;
        Ok(self.push(Op::SqL2Diff(a, b), Tensor::scalar(v), &[a, b]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = ops::mean(self.value(a));
        self.push(Op::Mean(a), Tensor::scalar(v), &[a])
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut vals = Vec::with_capacity(items.len());
        for &i in items {
            let v = self.value(i);
            if !v.is_scalar() {
                return Err(Error::dim(
                    "stack",
                    format!("node {} has shape {:?}, expected a scalar", i.0, v.shape()),
                ));
            }
            vals.push(v.item());
        }
        let v = Tensor::vector(vals)?;
        Ok(self.push(Op::Stack(items.to_vec()), v, items))
    }

    /// Mean softmax cross-entropy of `logits` (`b×c`) against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::dim(
                "backward",
                format!("loss node has shape {:?}, expected a scalar", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts_unchecked(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], contribution);
            }
        }

        let mut out = BTreeMap::new();
        for &p in &self.params {
            if p.0 > loss.0 {
                continue;
            }
            let g = grads[p.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(p).shape()));
            out.insert(p, g);
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::ChannelContract(c, d) => {
                let (gc, gd) = ops::channel_contract_backward(val(*c), val(*d), g);
                vec![(*c, gc), (*d, gd)]
            }
            Op::TransposedConv2d(i, k) => {
                let (gi, gk) = ops::transposed_conv2d_backward(val(*i), val(*k), g);
                vec![(*i, gi), (*k, gk)]
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                vec![(*a, Tensor::from_parts_unchecked(shape, g.data().to_vec()))]
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, bias) => {
                let c = val(*bias).len();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let bshape = val(*bias).shape().to_vec();
                vec![
                    (*a, g.clone()),
                    (*bias, Tensor::from_parts_unchecked(bshape, gb)),
                ]
            }
            Op::Mul(a, b) => {
                let ga = ops::mul(g, val(*b)).expect("same shape");
                let gb = ops::mul(g, val(*a)).expect("same shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, ops::scale(g, *f))],
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::from_parts_unchecked(g.shape().to_vec(), data))]
            }
            Op::MaxPool { input, argmax } => {
                let shape = val(*input).shape().to_vec();
                let f = shape[1];
                let mut gi = vec![0.0; shape[0] * f];
                for (pos, (&row, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    gi[row * f + pos % f] += gv;
                }
                vec![(*input, Tensor::from_parts_unchecked(shape, gi))]
            }
            Op::SoftmaxRows(a) => vec![(*a, ops::softmax_rows_backward(&node.value, g))],
            Op::SqL2Diff(a, b) => {
                let s = g.item();
                let (av, bv) = (val(*a), val(*b));
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| 2.0 * s * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                vec![
                    (*a, Tensor::from_parts_unchecked(av.shape().to_vec(), da)),
                    (*b, Tensor::from_parts_unchecked(bv.shape().to_vec(), db)),
                ]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Stack(items) => items
                .iter()
                .zip(g.data())
                .map(|(&i, &gv)| (i, Tensor::scalar(gv)))
                .collect(),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let s = g.item() / labels.len() as f64;
                let c = probs.shape()[1];
                let mut d = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= s;
                }
                vec![(
                    *logits,
                    Tensor::from_parts_unchecked(probs.shape().to_vec(), d),
                )]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1]));
        let loss = g.sq_l2_diff(x, zero).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
        assert!(grads.get(zero).is_none());
    }

    #[test]
    fn unused_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let p = g.param(Tensor::vector(vec![5.0]).unwrap());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]).unwrap());
        let b = g.scale(a, 2.0);
        assert!(!g.requires_grad(b));
        assert_eq!(g.op_tag(b), "scale");
    }
}
