#![allow(dead_code)]

use l3doc::backbone::{BackboneConfig, Head};
use l3doc::datasets::PointCloud;
use l3doc::factorization::{FactorSpec, KnowledgeBase, TaskFactors};
use l3doc::mam::MamConfig;
use l3doc::trainer::{build_step, trainable_tensors};
use l3doc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// Oracles: direct transcriptions of each definition, no shared code with
// the library kernels.

pub fn contract_oracle(c: &Tensor, d: &Tensor) -> Vec<f64> {
    let (n, a, b) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    let mut out = Vec::with_capacity(a * b);
    for i in 0..a {
        for j in 0..b {
            let mut acc = 0.0;
            for k in 0..n {
                acc += c.data()[k] * d.data()[(k * a + i) * b + j];
            }
            out.push(acc);
        }
    }
    out
}

pub fn deconv_oracle(input: &Tensor, kernel: &Tensor) -> Vec<f64> {
    let (h, w, ci) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (s, co) = (kernel.shape()[0], kernel.shape()[2]);
    let at = |y: usize, x: usize, i: usize| input.data()[(y * w + x) * ci + i];
    let k =
        |dy: usize, dx: usize, o: usize, i: usize| kernel.data()[((dy * s + dx) * co + o) * ci + i];
    let mut out = Vec::with_capacity(h * w * co);
    for y in 0..h {
        for x in 0..w {
            for o in 0..co {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        if dy > y || dx > x {
                            continue;
                        }
                        for i in 0..ci {
                            acc += at(y - dy, x - dx, i) * k(dy, dx, o, i);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn reconstruct_oracle(l: &Tensor, k: &Tensor, c: &Tensor) -> Vec<f64> {
    let d = Tensor::new(
        vec![l.shape()[0], l.shape()[1], k.shape()[2]],
        deconv_oracle(l, k),
    )
    .unwrap();
    contract_oracle(c, &d)
}

pub fn softmax_oracle(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Recomputes every min-distance from scratch at each step.
pub fn fps_oracle(cloud: &PointCloud, k: usize, start: usize) -> Vec<usize> {
    let d2 = |i: usize, j: usize| -> f64 {
        cloud
            .point(i)
            .iter()
            .zip(cloud.point(j))
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    };
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..cloud.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| d2(i, j))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

pub fn random_cloud(n: usize, rng: &mut impl Rng) -> PointCloud {
    PointCloud::new(3, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A tiny network with one or more archived tasks.
pub struct Micro {
    pub kb: KnowledgeBase,
    pub factors: TaskFactors,
    pub archive: Vec<TaskFactors>,
    pub points: Tensor,
    pub n_pts: usize,
    pub labels: Vec<usize>,
    pub backbone: BackboneConfig,
    pub mam: MamConfig,
}

pub fn micro(
    widths: &[usize],
    n_pts: usize,
    batch: usize,
    archived: usize,
    lambda: f64,
    seed: u64,
) -> Micro {
    let spec = FactorSpec::new(2, 2, 2, widths.to_vec()).unwrap();
    let mut r = rng(seed);
    let backbone = BackboneConfig {
        widths: widths.to_vec(),
        head_widths: vec![5],
        ..BackboneConfig::default()
    };
    let feat = *widths.last().unwrap();
    let mut kb = KnowledgeBase::init(&spec, &mut r);
    let archive: Vec<TaskFactors> = (0..archived)
        .map(|i| TaskFactors::init(i + 1, &spec, Head::init(feat, &[5], 2, &mut r), &mut r))
        .collect();
    // move the live base away from its snapshot so the knowledge gap is non-zero
    for l in kb.layers_mut() {
        for v in l.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let mut factors = TaskFactors::init(
        archived + 1,
        &spec,
        Head::init(feat, &[5], 2, &mut r),
        &mut r,
    );
    for lf in &mut factors.layers {
        for v in lf.bias.data_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
    }
    let points = uniform(&[batch * n_pts, widths[0]], &mut r);
    let labels = (0..batch).map(|i| i % 2).collect();
    Micro {
        kb,
        factors,
        archive,
        points,
        n_pts,
        labels,
        backbone,
        mam: MamConfig {
            lambda_l: lambda,
            ..MamConfig::default()
        },
    }
}

impl Micro {
    pub fn loss(&self) -> f64 {
        let refs: Vec<&TaskFactors> = self.archive.iter().collect();
        let sg = build_step(
            &self.kb,
            &self.factors,
            self.points.clone(),
            self.n_pts,
            &self.labels,
            &self.backbone,
            &self.mam,
            &refs,
        )
        .unwrap();
        sg.graph.value(sg.total).item()
    }

    pub fn analytic(&self) -> Vec<Tensor> {
        let refs: Vec<&TaskFactors> = self.archive.iter().collect();
        let sg = build_step(
            &self.kb,
            &self.factors,
            self.points.clone(),
            self.n_pts,
            &self.labels,
            &self.backbone,
            &self.mam,
            &refs,
        )
        .unwrap();
        let grads = sg.graph.backward(sg.total).unwrap();
        sg.params
            .iter()
            .map(|&p| grads.get(p).unwrap().clone())
            .collect()
    }
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every trainable element. Pairs where both magnitudes are
/// below `floor` are compared absolutely.
pub fn worst_gradient_error(m: &mut Micro, eps: f64, floor: f64) -> (f64, usize) {
    let analytic = m.analytic();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = trainable_tensors(&mut m.kb, &mut m.factors)[pi].data()[e];
            trainable_tensors(&mut m.kb, &mut m.factors)[pi].data_mut()[e] = orig + eps;
            let up = m.loss();
            trainable_tensors(&mut m.kb, &mut m.factors)[pi].data_mut()[e] = orig - eps;
            let down = m.loss();
            trainable_tensors(&mut m.kb, &mut m.factors)[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[e];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < floor {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}
