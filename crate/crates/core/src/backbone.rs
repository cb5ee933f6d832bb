//! Simplified PointNet: shared per-point MLP, global max-pool, per-task head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared L2 between softmax probabilities and one-hot targets.
    #[default]
    SquaredError,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_head_widths")]
    pub head_widths: Vec<usize>,
    #[serde(default)]
    pub loss: LossKind,
}

fn default_widths() -> Vec<usize> {
    vec![3, 64, 64, 64, 128, 1024]
}

fn default_head_widths() -> Vec<usize> {
    vec![256]
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: default_widths(),
            head_widths: default_head_widths(),
            loss: LossKind::default(),
        }
    }
}

impl BackboneConfig {
    pub fn point_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in×out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-task classifier MLP. ReLU between layers, none after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub layers: Vec<DenseLayer>,
}

impl Head {
    /// He-scaled normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: Tensor::randn(&[w[0], w[1]], (2.0 / w[0] as f64).sqrt(), rng),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Head { layers }
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    pub fn num_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Head parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct HeadNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl HeadNodes {
    pub fn params(g: &mut Graph, head: &Head) -> Self {
        Self::build(g, head, true)
    }

    pub fn constants(g: &mut Graph, head: &Head) -> Self {
        Self::build(g, head, false)
    }

    fn build(g: &mut Graph, head: &Head, trainable: bool) -> Self {
        let layers = head
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        HeadNodes { layers }
    }
}

/// Class scores for a batch of objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub scores: Tensor,
}

impl Logits {
    pub fn probabilities(&self) -> Tensor {
        ops::softmax_rows(&self.scores).expect("logits are a matrix")
    }
}

/// Stacks equally sized `n_pts×d` clouds into a `(b*n_pts)×d` matrix.
pub fn stack_clouds<'a>(
    clouds: impl IntoIterator<Item = &'a [f64]>,
    n_pts: usize,
    dim: usize,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut b = 0;
    for c in clouds {
        if c.len() != n_pts * dim {
            return Err(Error::dim(
                "stack_clouds",
                format!("cloud has {} values, expected {n_pts}x{dim}", c.len()),
            ));
        }
        data.extend_from_slice(c);
        b += 1;
    }
    Tensor::new(vec![b * n_pts, dim], data)
}

/// Shared MLP, max-pool over each object's points, head.
///
/// `points` is `(b*n_pts)×d`; `kernels[l]` are `w_in×w_out` matrices.
pub fn forward(
    g: &mut Graph,
    points: NodeId,
    n_pts: usize,
    kernels: &[NodeId],
    biases: &[NodeId],
    head: &HeadNodes,
) -> Result<NodeId> {
    if kernels.len() != biases.len() {
        return Err(Error::dim(
            "forward",
            format!(
                "{} kernels but {} bias vectors",
                kernels.len(),
                biases.len()
            ),
        ));
    }
    if n_pts == 0 {
        return Err(Error::dim(
            "forward",
            "objects must have at least one point",
        ));
    }
    let mut h = points;
    for (&w, &b) in kernels.iter().zip(biases) {
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        h = g.relu(z);
    }
    let mut x = g.max_pool_groups(h, n_pts)?;
    let last = head.layers.len().saturating_sub(1);
    for (i, &(w, b)) in head.layers.iter().enumerate() {
        let z = g.matmul(x, w)?;
        x = g.add_row(z, b)?;
        if i != last {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Non-differentiable forward pass from explicit kernel matrices.
pub fn predict(
    points: &Tensor,
    n_pts: usize,
    kernels: &[Tensor],
    biases: &[Tensor],
    head: &Head,
) -> Result<Logits> {
    let mut g = Graph::new();
    let x = g.constant(points.clone());
    let ks: Vec<NodeId> = kernels.iter().map(|k| g.constant(k.clone())).collect();
    let bs: Vec<NodeId> = biases.iter().map(|b| g.constant(b.clone())).collect();
    let hn = HeadNodes::constants(&mut g, head);
    let out = forward(&mut g, x, n_pts, &ks, &bs, &hn)?;
    Ok(Logits {
        scores: g.value(out).clone(),
    })
}

/// Batch-mean classification loss.
pub fn classification_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    kind: LossKind,
) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(
            "classification_loss",
            format!("logits shape {shape:?}"),
        ));
    }
    let (b, c) = (shape[0], shape[1]);
    ops::check_labels("classification_loss", labels, b, c)?;
    match kind {
        LossKind::SquaredError => {
            let probs = g.softmax_rows(logits)?;
            let target = g.constant(ops::one_hot(labels, c)?);
            let sse = g.sq_l2_diff(probs, target)?;
            Ok(g.scale(sse, 1.0 / b as f64))
        }
        LossKind::CrossEntropy => g.cross_entropy(logits, labels),
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::dim(
            "accuracy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let c = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
