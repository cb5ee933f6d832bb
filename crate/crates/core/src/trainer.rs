//! Sequential task training: factor inheritance, knowledge-base snapshots,
//! archival, and the single-task / fine-tuning baselines.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, Head, HeadNodes};
use crate::datasets::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::factorization::{
    init_or_inherit_factors, reconstruct_kernel, reconstruct_kernel_node, FactorInit, FactorSpec,
    KnowledgeBase, TaskFactors,
};
use crate::graph::{Graph, NodeId};
use crate::mam::{self, FactorNodes, MamConfig};
use crate::metrics::{EpochRecord, PpaMode, RunLog, TaskLog};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Shared knowledge base with memory-attention regularization.
    #[default]
    L3doc,
    /// Independent model per task.
    Stl,
    /// Shared knowledge base, inherited factors, no regularization.
    Finetune,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l3doc" => Ok(Mode::L3doc),
            "stl" => Ok(Mode::Stl),
            "finetune" => Ok(Mode::Finetune),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub n_hat: usize,
    pub l_hat: usize,
    pub s: usize,
    #[serde(default)]
    pub init: FactorInit,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            n_hat: 16,
            l_hat: 32,
            s: 2,
            init: FactorInit::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub factor: FactorConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub mam: MamConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ppa: PpaMode,
}

impl ExperimentConfig {
    pub fn factor_spec(&self) -> Result<FactorSpec> {
        FactorSpec::new(
            self.factor.n_hat,
            self.factor.l_hat,
            self.factor.s,
            self.backbone.widths.clone(),
        )?
        .with_init(self.factor.init)
    }

    pub fn validate(&self) -> Result<()> {
        self.factor_spec()?;
        self.mam.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                t.learning_rate
            )));
        }
        if self.backbone.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Moment estimates for the adaptive-moment update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&mut Tensor]) -> Self {
        OptimizerState {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    hp: &OptimizerConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
    }
}

/// Trainable tensors in a fixed order: `L` per layer, then `K`, `C`, bias
/// per layer, then the head.
pub fn trainable_tensors<'a>(
    kb: &'a mut KnowledgeBase,
    factors: &'a mut TaskFactors,
) -> Vec<&'a mut Tensor> {
    let mut out: Vec<&mut Tensor> = kb.layers_mut().iter_mut().collect();
    for lf in factors.layers.iter_mut() {
        out.push(&mut lf.deconv);
        out.push(&mut lf.contraction);
        out.push(&mut lf.bias);
    }
    for dl in factors.head.layers.iter_mut() {
        out.push(&mut dl.weight);
        out.push(&mut dl.bias);
    }
    out
}

/// Nodes of one training step's objective.
#[derive(Debug)]
pub struct StepGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub classification: NodeId,
    /// Same order as [`trainable_tensors`].
    pub params: Vec<NodeId>,
}

/// Builds the differentiable objective for one batch.
///
/// `archive` holds the frozen factors of earlier tasks; pass an empty slice
/// for the plain classification objective.
#[allow(clippy::too_many_arguments)]
pub fn build_step(
    kb: &KnowledgeBase,
    factors: &TaskFactors,
    points: Tensor,
    n_pts: usize,
    labels: &[usize],
    backbone_cfg: &BackboneConfig,
    mam_cfg: &MamConfig,
    archive: &[&TaskFactors],
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let mut params = Vec::new();
    let live: Vec<NodeId> = kb.layers().iter().map(|l| g.param(l.clone())).collect();
    params.extend(&live);
    let mut current = FactorNodes {
        deconv: Vec::new(),
        contraction: Vec::new(),
    };
    let mut biases = Vec::new();
    for lf in &factors.layers {
        let k = g.param(lf.deconv.clone());
        let c = g.param(lf.contraction.clone());
        let b = g.param(lf.bias.clone());
        params.extend([k, c, b]);
        current.deconv.push(k);
        current.contraction.push(c);
        biases.push(b);
    }
    let head = HeadNodes::params(&mut g, &factors.head);
    for &(w, b) in &head.layers {
        params.extend([w, b]);
    }
    let mut kernels = Vec::with_capacity(live.len());
    for (i, &l) in live.iter().enumerate() {
        kernels.push(reconstruct_kernel_node(
            &mut g,
            l,
            current.deconv[i],
            current.contraction[i],
        )?);
    }
    let x = g.constant(points);
    let logits = backbone::forward(&mut g, x, n_pts, &kernels, &biases, &head)?;
    let lc = backbone::classification_loss(&mut g, logits, labels, backbone_cfg.loss)?;
    let total = mam::total_loss(&mut g, lc, kb, &live, &current, archive, mam_cfg)?.total;
    Ok(StepGraph {
        graph: g,
        total,
        classification: lc,
        params,
    })
}

/// Rebuilds every layer's `w_in×w_out` kernel from plain tensors.
pub fn kernels_for(kb_layers: &[Tensor], factors: &TaskFactors) -> Result<Vec<Tensor>> {
    kb_layers
        .iter()
        .zip(&factors.layers)
        .map(|(l, lf)| {
            let w = reconstruct_kernel(l, &lf.deconv, &lf.contraction)?;
            let s = w.shape().to_vec();
            w.reshape(&[s[2], s[3]])
        })
        .collect()
}

const EVAL_CHUNK: usize = 32;

/// Test accuracy of one task's factors over `samples`.
pub fn evaluate(kb_layers: &[Tensor], factors: &TaskFactors, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let kernels = kernels_for(kb_layers, factors)?;
    let biases: Vec<Tensor> = factors.layers.iter().map(|l| l.bias.clone()).collect();
    let n_pts = samples[0].cloud.len();
    let dim = samples[0].cloud.dim();
    let mut hits = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let pts = backbone::stack_clouds(chunk.iter().map(|s| s.cloud.coords()), n_pts, dim)?;
        let logits = backbone::predict(&pts, n_pts, &kernels, &biases, &factors.head)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        hits += backbone::accuracy(&logits.scores, &labels)? * chunk.len() as f64;
    }
    Ok(hits / samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ArchiveEntry {
    pub factors: TaskFactors,
    pub test: Arc<[Sample]>,
    pub peak: f64,
    /// Task-private knowledge base (single-task mode only).
    pub own_knowledge: Option<Vec<Tensor>>,
}

/// Append-only record of finished tasks.
#[derive(Debug, Default)]
pub struct TaskArchive {
    entries: Vec<ArchiveEntry>,
    reads: AtomicUsize,
}

impl TaskArchive {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Read access for evaluation; not counted.
    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    /// Frozen factors used by training (inheritance, regularizers). Counted.
    pub fn frozen_factors(&self) -> Vec<&TaskFactors> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.entries.iter().map(|e| &e.factors).collect()
    }

    pub fn training_reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn push(&mut self, entry: ArchiveEntry) {
        self.entries.push(entry);
    }
}

/// Order-independent hash of every parameter bit in `factors`.
pub fn fingerprint(factors: &TaskFactors) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_usize(factors.task_id);
    let mut feed = |t: &Tensor| {
        for &d in t.shape() {
            h.write_usize(d);
        }
        for v in t.data() {
            h.write_u64(v.to_bits());
        }
    };
    for l in &factors.layers {
        feed(&l.deconv);
        feed(&l.contraction);
        feed(&l.bias);
    }
    for d in &factors.head.layers {
        feed(&d.weight);
        feed(&d.bias);
    }
    h.finish()
}

/// Accuracy of every archived task under the live knowledge base (or the
/// task's own, in single-task mode) with its frozen factors and head.
pub fn evaluate_archive(
    kb: &KnowledgeBase,
    archive: &TaskArchive,
    threads: usize,
) -> Result<Vec<f64>> {
    let entries = archive.entries();
    let eval = |e: &ArchiveEntry| -> Result<f64> {
        let layers = e.own_knowledge.as_deref().unwrap_or(kb.layers());
        evaluate(layers, &e.factors, &e.test)
    };
    if threads <= 1 || entries.len() <= 1 {
        return entries.iter().map(eval).collect();
    }
    let chunk = entries.len().div_ceil(threads);
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(eval).collect::<Result<Vec<f64>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(entries.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Independent random streams of a run, one per purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Knowledge = 1,
    Factors = 2,
    Head = 3,
    Shuffle = 4,
}

/// Generator for `stream` of task `task` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | task as u64);
    rng
}

fn check_dataset(ds: &TaskDataset, backbone_cfg: &BackboneConfig) -> Result<()> {
    ds.validate()?;
    if ds.point_dim() != backbone_cfg.point_dim() {
        return Err(Error::Data(format!(
            "task {} has {}-dimensional points, backbone expects {}",
            ds.task_id,
            ds.point_dim(),
            backbone_cfg.point_dim()
        )));
    }
    Ok(())
}

/// Trains one task's factors (and the shared knowledge base) in place.
///
/// `archive` is only read when the mode regularizes against past tasks.
pub fn train_task(
    task: usize,
    dataset: &TaskDataset,
    kb: &mut KnowledgeBase,
    mut factors: TaskFactors,
    archive: &TaskArchive,
    cfg: &ExperimentConfig,
) -> Result<(TaskFactors, TaskLog)> {
    check_dataset(dataset, &cfg.backbone)?;
    let spec = cfg.factor_spec()?;
    factors.check_shapes(&spec)?;
    let n_pts = dataset.points_per_object();
    let dim = dataset.point_dim();
    let tc = &cfg.training;

    let regularize = cfg.mode == Mode::L3doc && !archive.is_empty();
    let frozen: Vec<&TaskFactors> = if regularize {
        archive.frozen_factors()
    } else {
        Vec::new()
    };

    let mut opt_state = OptimizerState::new(&trainable_tensors(kb, &mut factors));
    let mut rng = stream_rng(cfg.seed, Stream::Shuffle, task);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = TaskLog {
        task,
        ..TaskLog::default()
    };

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut wall = 0.0;
        for (step, batch) in order.chunks(tc.batch_size).enumerate() {
            let started = Instant::now();
            let samples: Vec<&Sample> = batch.iter().map(|&i| &dataset.train[i]).collect();
            let points =
                backbone::stack_clouds(samples.iter().map(|s| s.cloud.coords()), n_pts, dim)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let sg = build_step(
                kb,
                &factors,
                points,
                n_pts,
                &labels,
                &cfg.backbone,
                &cfg.mam,
                &frozen,
            )?;
            let value = sg.graph.value(sg.total).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    task,
                    epoch,
                    step: step + 1,
                    value,
                });
            }
            let mut grads = sg.graph.backward(sg.total)?;
            let grads: Vec<Tensor> = sg
                .params
                .iter()
                .map(|&id| grads.take(id).expect("every parameter has a gradient"))
                .collect();
            let mut params = trainable_tensors(kb, &mut factors);
            match tc.optimizer.kind {
                OptimizerKind::Adam => adam_step(
                    &mut params,
                    &grads,
                    &mut opt_state,
                    tc.learning_rate,
                    &tc.optimizer,
                ),
                OptimizerKind::Sgd => sgd_step(&mut params, &grads, tc.learning_rate),
            }
            loss_sum += value;
            steps += 1;
            wall += started.elapsed().as_secs_f64() * 1e3;
        }
        let test_acc = evaluate(kb.layers(), &factors, &dataset.test)?;
        log.epochs.push(EpochRecord {
            task,
            epoch,
            loss: loss_sum / steps as f64,
            test_acc,
            wall_ms: wall,
            steps,
        });
    }
    Ok((factors, log))
}

/// Result of a full task sequence.
#[derive(Debug)]
pub struct RunOutcome {
    pub archive: TaskArchive,
    pub log: RunLog,
    pub knowledge: KnowledgeBase,
}

/// Processes tasks in order, archiving each task's factors and evaluating
/// every seen task at each task boundary.
pub fn run_sequence(
    cfg: &ExperimentConfig,
    tasks: &[TaskDataset],
    eval_threads: usize,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Data("no tasks to run".into()));
    }
    let spec = cfg.factor_spec()?;
    let mut kb = KnowledgeBase::init(&spec, &mut stream_rng(cfg.seed, Stream::Knowledge, 1));
    let mut archive = TaskArchive::default();
    let mut log = RunLog::default();

    for (i, ds) in tasks.iter().enumerate() {
        let t = i + 1;
        check_dataset(ds, &cfg.backbone)?;
        let head = Head::init(
            cfg.backbone.feature_dim(),
            &cfg.backbone.head_widths,
            ds.num_classes(),
            &mut stream_rng(cfg.seed, Stream::Head, t),
        );
        let mut factor_rng = stream_rng(cfg.seed, Stream::Factors, t);
        let factors = match cfg.mode {
            Mode::Stl => {
                kb = KnowledgeBase::init(&spec, &mut stream_rng(cfg.seed, Stream::Knowledge, t));
                TaskFactors::init(t, &spec, head, &mut factor_rng)
            }
            Mode::L3doc | Mode::Finetune => {
                let frozen = if archive.is_empty() {
                    Vec::new()
                } else {
                    archive.frozen_factors()
                };
                init_or_inherit_factors(t, frozen.last().copied(), &spec, head, &mut factor_rng)
            }
        };
        let (factors, mut task_log) = train_task(t, ds, &mut kb, factors, &archive, cfg)?;
        if cfg.mode != Mode::Stl {
            kb.take_snapshot();
        }
        archive.push(ArchiveEntry {
            peak: task_log.peak(),
            factors,
            test: ds.test.clone().into(),
            own_knowledge: (cfg.mode == Mode::Stl).then(|| kb.layers().to_vec()),
        });
        task_log.seen_accuracies = evaluate_archive(&kb, &archive, eval_threads)?;
        log::info!(
            "task {t}: final test acc {:.4}, seen {:?}",
            task_log.epochs.last().map_or(0.0, |e| e.test_acc),
            task_log.seen_accuracies
        );
        log.tasks.push(task_log);
    }
    Ok(RunOutcome {
        archive,
        log,
        knowledge: kb,
    })
}
