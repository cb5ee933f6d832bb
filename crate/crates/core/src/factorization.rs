//! Layer-wise factorization of 1×1 convolution kernels.
//!
//! Each layer's kernel `W` (`1×1×w_in×w_out`) is rebuilt from a shared
//! knowledge tensor `L` (`n×w_in×l_out`) and two task-specific factors: a
//! deconvolution kernel `K` (`s×s×w_out×l_out`) and a contraction vector `C`
//! (`1×1×n`):
//!
//! ```text
//! D = deconv(L; K)        n×w_in×w_out
//! W = sum_k C[k] D[k]     1×1×w_in×w_out
//! ```
//!
//! with `n = w_out / n_hat` and `l_out = w_out / l_hat`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Head;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::tensor::Tensor;

/// Standard deviation of [`FactorInit::Normal`] when none is given.
pub const INIT_STD: f64 = 0.05;

/// Per-layer channel extents of the MLP used in the reference parameter count.
pub const POINTNET_WIDTHS: [usize; 6] = [3, 64, 64, 64, 128, 1024];

/// Kernel total quoted for [`POINTNET_WIDTHS`]; the product sum is 147648.
pub const REPORTED_KERNEL_TOTAL: u64 = 159_936;
/// Totals quoted for the two presets over [`POINTNET_WIDTHS`] at ten tasks.
pub const REPORTED_GROUP1_TOTAL: u64 = 950_664;
pub const REPORTED_GROUP2_TOTAL: u64 = 475_332;

pub fn latent_channels(w_out: usize, n_hat: usize) -> Result<usize> {
    shrink(w_out, n_hat, "n_hat")
}

pub fn knowledge_channels(w_out: usize, l_hat: usize) -> Result<usize> {
    shrink(w_out, l_hat, "l_hat")
}

fn shrink(w_out: usize, scale: usize, name: &str) -> Result<usize> {
    if scale == 0 || w_out == 0 || !w_out.is_multiple_of(scale) {
        return Err(Error::Config(format!(
            "{name}={scale} must be positive and divide output width {w_out}"
        )));
    }
    Ok(w_out / scale)
}

/// How `L`, `K` and `C` are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorInit {
    /// Every element i.i.d. `N(0, std²)`.
    Normal { std: f64 },
    /// `L ~ N(0, σ²)`, `C ~ N(0, 1/n)`, `K ~ N(0, 2/(σ²·w_in·s²·l_out))`, so
    /// each reconstructed weight has variance close to `2/w_in`.
    Scaled { knowledge_std: f64 },
}

impl Default for FactorInit {
    fn default() -> Self {
        FactorInit::Scaled { knowledge_std: 0.3 }
    }
}

impl FactorInit {
    /// Standard deviations for `(L, K, C)` of one layer.
    pub fn stds(&self, ls: &LayerShape) -> (f64, f64, f64) {
        match *self {
            FactorInit::Normal { std } => (std, std, std),
            FactorInit::Scaled { knowledge_std: sl } => {
                let fan = (ls.w_in * ls.s * ls.s * ls.knowledge) as f64;
                (sl, (2.0 / fan).sqrt() / sl, (1.0 / ls.latent as f64).sqrt())
            }
        }
    }
}

/// Shrinkage scales, deconvolution size, layer widths and initializer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    n_hat: usize,
    l_hat: usize,
    s: usize,
    widths: Vec<usize>,
    init: FactorInit,
}

/// Resolved extents of one factorized layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub w_in: usize,
    pub w_out: usize,
    /// `n`: number of latent slices contracted by `C`.
    pub latent: usize,
    /// `l_out`: knowledge channels of `L`.
    pub knowledge: usize,
    pub s: usize,
}

impl LayerShape {
    pub fn knowledge_shape(&self) -> [usize; 3] {
        [self.latent, self.w_in, self.knowledge]
    }

    pub fn deconv_shape(&self) -> [usize; 4] {
        [self.s, self.s, self.w_out, self.knowledge]
    }

    pub fn contraction_shape(&self) -> [usize; 3] {
        [1, 1, self.latent]
    }
}

impl FactorSpec {
    pub fn new(n_hat: usize, l_hat: usize, s: usize, widths: Vec<usize>) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config(
                "deconvolution size s must be positive".into(),
            ));
        }
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two widths to form a layer, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("widths {widths:?} must be positive")));
        }
        for &w_out in &widths[1..] {
            latent_channels(w_out, n_hat)?;
            knowledge_channels(w_out, l_hat)?;
        }
        Ok(FactorSpec {
            n_hat,
            l_hat,
            s,
            widths,
            init: FactorInit::default(),
        })
    }

    pub fn with_init(mut self, init: FactorInit) -> Result<Self> {
        let ok = match init {
            FactorInit::Normal { std } => std.is_finite() && std >= 0.0,
            FactorInit::Scaled { knowledge_std } => {
                knowledge_std.is_finite() && knowledge_std > 0.0
            }
        };
        if !ok {
            return Err(Error::Config(format!("invalid initializer {init:?}")));
        }
        self.init = init;
        Ok(self)
    }

    pub fn init(&self) -> FactorInit {
        self.init
    }

    pub fn group1(widths: Vec<usize>) -> Result<Self> {
        Self::new(16, 32, 2, widths)
    }

    pub fn group2(widths: Vec<usize>) -> Result<Self> {
        Self::new(32, 32, 2, widths)
    }

    pub fn n_hat(&self) -> usize {
        self.n_hat
    }

    pub fn l_hat(&self) -> usize {
        self.l_hat
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        self.widths
            .windows(2)
            .map(|w| LayerShape {
                w_in: w[0],
                w_out: w[1],
                latent: w[1] / self.n_hat,
                knowledge: w[1] / self.l_hat,
                s: self.s,
            })
            .collect()
    }
}

/// Shared per-layer knowledge tensors plus the snapshot frozen at the last
/// task boundary.
#[derive(Debug, Serialize, Deserialize)]
pub struct KnowledgeBase {
    layers: Vec<Tensor>,
    snapshot: Vec<Tensor>,
    #[serde(skip)]
    snapshot_reads: AtomicUsize,
}

impl Clone for KnowledgeBase {
    fn clone(&self) -> Self {
        KnowledgeBase {
            layers: self.layers.clone(),
            snapshot: self.snapshot.clone(),
            snapshot_reads: AtomicUsize::new(self.snapshot_reads()),
        }
    }
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.snapshot == other.snapshot
    }
}

impl KnowledgeBase {
    pub fn init<R: Rng + ?Sized>(spec: &FactorSpec, rng: &mut R) -> Self {
        let layers: Vec<Tensor> = spec
            .layers()
            .iter()
            .map(|ls| Tensor::randn(&ls.knowledge_shape(), spec.init.stds(ls).0, rng))
            .collect();
        KnowledgeBase {
            snapshot: layers.clone(),
            layers,
            snapshot_reads: AtomicUsize::new(0),
        }
    }

    pub fn from_layers(layers: Vec<Tensor>) -> Self {
        KnowledgeBase {
            snapshot: layers.clone(),
            layers,
            snapshot_reads: AtomicUsize::new(0),
        }
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }

    /// Frozen copy from the previous task boundary. Every call is counted.
    pub fn snapshot(&self) -> &[Tensor] {
        self.snapshot_reads.fetch_add(1, Ordering::Relaxed);
        &self.snapshot
    }

    pub fn snapshot_reads(&self) -> usize {
        self.snapshot_reads.load(Ordering::Relaxed)
    }

    /// Freezes the live tensors as the new snapshot.
    pub fn take_snapshot(&mut self) {
        self.snapshot = self.layers.clone();
    }

    pub fn num_elements(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum()
    }
}

/// Task-specific factors for one factorized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFactors {
    /// Deconvolution kernel, `s×s×w_out×l_out`.
    pub deconv: Tensor,
    /// Contraction vector, `1×1×n`.
    pub contraction: Tensor,
    /// Not factorized.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFactors {
    pub task_id: usize,
    pub layers: Vec<LayerFactors>,
    pub head: Head,
}

impl TaskFactors {
    /// Fresh random factors (first task, or every task in single-task mode).
    pub fn init<R: Rng + ?Sized>(
        task_id: usize,
        spec: &FactorSpec,
        head: Head,
        rng: &mut R,
    ) -> Self {
        let layers = spec
            .layers()
            .iter()
            .map(|ls| {
                let (_, k_std, c_std) = spec.init.stds(ls);
                LayerFactors {
                    deconv: Tensor::randn(&ls.deconv_shape(), k_std, rng),
                    contraction: Tensor::randn(&ls.contraction_shape(), c_std, rng),
                    bias: Tensor::zeros(&[ls.w_out]),
                }
            })
            .collect();
        TaskFactors {
            task_id,
            layers,
            head,
        }
    }

    /// `K`, `C` and biases copied from `prev`; the head is replaced.
    pub fn inherit(task_id: usize, prev: &TaskFactors, head: Head) -> Self {
        TaskFactors {
            task_id,
            layers: prev.layers.clone(),
            head,
        }
    }

    pub fn check_shapes(&self, spec: &FactorSpec) -> Result<()> {
        let shapes = spec.layers();
        if shapes.len() != self.layers.len() {
            return Err(Error::dim(
                "task_factors",
                format!("{} layers, spec has {}", self.layers.len(), shapes.len()),
            ));
        }
        for (i, (ls, lf)) in shapes.iter().zip(&self.layers).enumerate() {
            if lf.deconv.shape() != ls.deconv_shape()
                || lf.contraction.shape() != ls.contraction_shape()
                || lf.bias.shape() != [ls.w_out]
            {
                return Err(Error::dim(
                    "task_factors",
                    format!(
                        "layer {i}: K {:?}, C {:?}, bias {:?} inconsistent with {ls:?}",
                        lf.deconv.shape(),
                        lf.contraction.shape(),
                        lf.bias.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Number of `K` and `C` elements (heads and biases excluded).
    pub fn factor_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.deconv.len() + l.contraction.len())
            .sum()
    }
}

/// `t == 1` (no previous factors): random init; otherwise inherit `K`, `C`.
pub fn init_or_inherit_factors<R: Rng + ?Sized>(
    task_id: usize,
    prev: Option<&TaskFactors>,
    spec: &FactorSpec,
    head: Head,
    rng: &mut R,
) -> TaskFactors {
    match prev {
        None => TaskFactors::init(task_id, spec, head, rng),
        Some(p) => TaskFactors::inherit(task_id, p, head),
    }
}

fn check_reconstruct_shapes(l: &Tensor, k: &Tensor, c: &Tensor) -> Result<()> {
    let (ls, ks, cs) = (l.shape(), k.shape(), c.shape());
    let ok = ls.len() == 3
        && ks.len() == 4
        && cs.len() == 3
        && ks[3] == ls[2]
        && cs[0] == 1
        && cs[1] == 1
        && cs[2] == ls[0];
    if !ok {
        return Err(Error::dim(
            "reconstruct_kernel",
            format!("L {ls:?}, K {ks:?}, C {cs:?} are inconsistent"),
        ));
    }
    Ok(())
}

/// Rebuilds `W` (`1×1×w_in×w_out`) from `L`, `K` and `C`.
pub fn reconstruct_kernel(l: &Tensor, k: &Tensor, c: &Tensor) -> Result<Tensor> {
    check_reconstruct_shapes(l, k, c)?;
    let d = ops::transposed_conv2d(l, k)?;
    ops::channel_contract(c, &d)
}

/// Differentiable [`reconstruct_kernel`]; returns the `w_in×w_out` matrix.
pub fn reconstruct_kernel_node(g: &mut Graph, l: NodeId, k: NodeId, c: NodeId) -> Result<NodeId> {
    check_reconstruct_shapes(g.value(l), g.value(k), g.value(c))?;
    let d = g.transposed_conv2d(l, k)?;
    let w = g.channel_contract(c, d)?;
    let shape = g.value(w).shape().to_vec();
    g.reshape(w, &[shape[2], shape[3]])
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Config(format!(
            "widths {widths:?} must have at least two positive entries"
        )));
    }
    Ok(())
}

/// `N_W`: elements of the unfactorized kernels.
pub fn kernel_elements(widths: &[usize]) -> Result<u64> {
    check_widths(widths)?;
    Ok(widths.windows(2).map(|w| (w[0] * w[1]) as u64).sum())
}

/// Independent per-task models: `N_W * t_max`.
pub fn count_stl(widths: &[usize], t_max: u64) -> Result<u64> {
    Ok(kernel_elements(widths)? * t_max)
}

/// Extents of the deconvolutional factorized baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DfCnnDims {
    pub u: u64,
    pub v_h: u64,
    pub v_w: u64,
    pub l_h: u64,
    pub l_w: u64,
    pub l_c: u64,
}

/// `u * (N_W + v_h * v_w * l_h) * t_max + l_h * l_w * l_c`.
pub fn count_dfcnn(widths: &[usize], dims: DfCnnDims, t_max: u64) -> Result<u64> {
    let n_w = kernel_elements(widths)?;
    Ok(dims.u * (n_w + dims.v_h * dims.v_w * dims.l_h) * t_max + dims.l_h * dims.l_w * dims.l_c)
}

/// Per-layer terms of the factorized count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub shape: LayerShape,
    /// `n + s^2 * w_out * l_out`, paid once per task.
    pub per_task: u64,
    /// `n * w_in * l_out`, paid once.
    pub shared: u64,
}

impl LayerCount {
    pub fn total(&self, t_max: u64) -> u64 {
        self.per_task * t_max + self.shared
    }
}

pub fn l3doc_breakdown(spec: &FactorSpec) -> Vec<LayerCount> {
    spec.layers()
        .into_iter()
        .map(|ls| {
            let (n, w_in, w_out, l_out, s) = (
                ls.latent as u64,
                ls.w_in as u64,
                ls.w_out as u64,
                ls.knowledge as u64,
                ls.s as u64,
            );
            LayerCount {
                shape: ls,
                per_task: n + s * s * w_out * l_out,
                shared: n * w_in * l_out,
            }
        })
        .collect()
}

/// `sum_l (n + s^2 * w_out * l_out) * t_max + n * w_in * l_out`.
pub fn count_l3doc(spec: &FactorSpec, t_max: u64) -> u64 {
    l3doc_breakdown(spec).iter().map(|lc| lc.total(t_max)).sum()
}

/// Allocated `L`, `K` and `C` elements.
pub fn parameter_census(kb: &KnowledgeBase, tasks: &[TaskFactors]) -> u64 {
    (kb.num_elements()
        + tasks
            .iter()
            .map(TaskFactors::factor_elements)
            .sum::<usize>()) as u64
}

/// Head and bias elements, which the census leaves out.
pub fn auxiliary_census(tasks: &[TaskFactors]) -> u64 {
    tasks
        .iter()
        .map(|t| t.layers.iter().map(|l| l.bias.len()).sum::<usize>() + t.head.num_elements())
        .sum::<usize>() as u64
}
