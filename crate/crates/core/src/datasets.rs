//! Point-cloud ingestion, preprocessing, task splits and synthetic shapes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n_pts × dim` coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    pub source: Option<String>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{} coordinates do not form a non-empty cloud of dimension {dim}",
                coords.len()
            )));
        }
        Ok(PointCloud {
            dim,
            coords,
            source: None,
        })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(3, points.iter().flatten().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        PointCloud {
            dim: self.dim,
            coords,
            source: self.source.clone(),
        }
    }

    pub fn max_radius(&self) -> f64 {
        self.coords
            .chunks(self.dim)
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn parse_num<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} {tok:?}"),
    })
}

/// Parses an Object File Format mesh. Polygons are fan-triangulated.
pub fn parse_off(bytes: &[u8]) -> Result<Mesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let rest = header.strip_prefix("OFF").ok_or_else(|| Error::Parse {
        line: hline,
        msg: format!("expected OFF header, got {header:?}"),
    })?;
    let mut counts: Vec<&str> = rest.split_whitespace().collect();
    let mut count_line = hline;
    if counts.is_empty() {
        let (l, c) = lines.next().ok_or(Error::Parse {
            line: hline,
            msg: "missing vertex/face counts".into(),
        })?;
        counts = c.split_whitespace().collect();
        count_line = l;
    }
    if counts.len() < 2 {
        return Err(Error::Parse {
            line: count_line,
            msg: format!("expected '<vertices> <faces> [edges]', got {counts:?}"),
        });
    }
    let nv: usize = parse_num(counts[0], count_line, "vertex count")?;
    let nf: usize = parse_num(counts[1], count_line, "face count")?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines.next().ok_or(Error::Parse {
            line: count_line,
            msg: format!("expected {nv} vertices, found {}", vertices.len()),
        })?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::Parse {
                line: l,
                msg: format!("vertex needs 3 coordinates, got {}", toks.len()),
            });
        }
        vertices.push([
            parse_num(toks[0], l, "coordinate")?,
            parse_num(toks[1], l, "coordinate")?,
            parse_num(toks[2], l, "coordinate")?,
        ]);
    }

    let mut triangles = Vec::with_capacity(nf);
    for f in 0..nf {
        let (l, s) = lines.next().ok_or(Error::Parse {
            line: count_line,
            msg: format!("expected {nf} faces, found {f}"),
        })?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        let k: usize = parse_num(toks[0], l, "face size")?;
        if k < 3 || toks.len() < k + 1 {
            return Err(Error::Parse {
                line: l,
                msg: format!("face declares {k} vertices but lists {}", toks.len() - 1),
            });
        }
        let mut idx = Vec::with_capacity(k);
        for tok in &toks[1..=k] {
            let i: usize = parse_num(tok, l, "vertex index")?;
            if i >= nv {
                return Err(Error::Parse {
                    line: l,
                    msg: format!("vertex index {i} out of range for {nv} vertices"),
                });
            }
            idx.push(i);
        }
        for j in 1..k - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(Mesh {
        vertices,
        triangles,
    })
}

pub fn serialize_off(mesh: &Mesh) -> String {
    let mut s = String::from("OFF\n");
    let _ = writeln!(s, "{} {} 0", mesh.vertices.len(), mesh.triangles.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Area-weighted uniform surface sampling.
pub fn sample_mesh(mesh: &Mesh, n_pts: usize, seed: u64) -> Result<PointCloud> {
    if n_pts == 0 {
        return Err(Error::Data("cannot sample zero points".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += triangle_area(
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
        );
        cumulative.push(total);
    }
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Data("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n_pts * 3);
    for _ in 0..n_pts {
        let r = rng.gen::<f64>() * total;
        let ti = cumulative
            .partition_point(|&c| c <= r)
            .min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[ti].map(|i| mesh.vertices[i]);
        let r1: f64 = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        for k in 0..3 {
            coords.push(wa * a[k] + wb * b[k] + wc * c[k]);
        }
    }
    PointCloud::new(3, coords)
}

/// Greedy max-min subset of `k` points starting at `start`; ties go to the
/// lowest index.
pub fn farthest_point_sampling(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k > n {
        return Err(Error::Data(format!("cannot pick {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::Data(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let dist2 = |i: usize, j: usize| -> f64 {
        cloud
            .point(i)
            .iter()
            .zip(cloud.point(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, md) in min_d.iter_mut().enumerate() {
            if *md == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(current, i);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Centers on the centroid and scales so the farthest point has radius 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let d = cloud.dim();
    let n = cloud.len() as f64;
    let mut centroid = vec![0.0; d];
    for p in cloud.coords().chunks(d) {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    let mut coords: Vec<f64> = cloud
        .coords()
        .chunks(d)
        .flat_map(|p| {
            p.iter()
                .zip(&centroid)
                .map(|(v, c)| v - c)
                .collect::<Vec<_>>()
        })
        .collect();
    let radius = coords
        .chunks(d)
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::Data("cloud has zero radius".into()));
    }
    for v in coords.iter_mut() {
        *v /= radius;
    }
    let mut out = PointCloud::new(d, coords)?;
    out.source = cloud.source.clone();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Data(format!(
                "task {} needs non-empty train and test splits",
                self.task_id
            )));
        }
        let c = self.num_classes();
        if let Some(s) = self.train.iter().chain(&self.test).find(|s| s.label >= c) {
            return Err(Error::Data(format!(
                "task {}: label {} out of range for {c} classes",
                self.task_id, s.label
            )));
        }
        let first = &self.train[0].cloud;
        let (n, d) = (first.len(), first.dim());
        if self
            .train
            .iter()
            .chain(&self.test)
            .any(|s| s.cloud.len() != n || s.cloud.dim() != d)
        {
            return Err(Error::Data(format!(
                "task {}: every cloud must have {n} points of dimension {d}",
                self.task_id
            )));
        }
        Ok(())
    }

    pub fn points_per_object(&self) -> usize {
        self.train[0].cloud.len()
    }

    pub fn point_dim(&self) -> usize {
        self.train[0].cloud.dim()
    }
}

/// Class subsets for each task of a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub tasks: Vec<Vec<String>>,
}

/// Draws `classes_per_task` distinct classes per task; classes may recur
/// across tasks.
pub fn make_split_plan(
    class_names: &[String],
    num_tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if classes_per_task == 0 || classes_per_task > class_names.len() {
        return Err(Error::Config(format!(
            "classes_per_task={classes_per_task} must be in 1..={}",
            class_names.len()
        )));
    }
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = (0..num_tasks)
        .map(|_| {
            class_names
                .choose_multiple(&mut rng, classes_per_task)
                .cloned()
                .collect()
        })
        .collect();
    Ok(SplitPlan { seed, tasks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Helix,
    Cross,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Sphere,
        Primitive::Cube,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
        Primitive::Plane,
        Primitive::Helix,
        Primitive::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
            Primitive::Plane => "plane",
            Primitive::Helix => "helix",
            Primitive::Cross => "cross",
        }
    }

    /// One point on the canonical (unrotated) surface.
    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> [f64; 3] {
        let u = |rng: &mut R, lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
        match self {
            Primitive::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = norm(v);
                if n > 1e-12 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            },
            Primitive::Cube => {
                let h = 0.6;
                let face = rng.gen_range(0..6);
                let (a, b) = (u(rng, -h, h), u(rng, -h, h));
                let side = if face % 2 == 0 { h } else { -h };
                match face / 2 {
                    0 => [side, a, b],
                    1 => [a, side, b],
                    _ => [a, b, side],
                }
            }
            Primitive::Cylinder => {
                let (r, h) = (0.5, 0.6);
                let lateral = 2.0 * PI * r * 2.0 * h;
                let cap = PI * r * r;
                let pick = u(rng, 0.0, lateral + 2.0 * cap);
                let theta = u(rng, 0.0, 2.0 * PI);
                if pick < lateral {
                    [r * theta.cos(), r * theta.sin(), u(rng, -h, h)]
                } else {
                    let rho = r * rng.gen::<f64>().sqrt();
                    let z = if pick < lateral + cap { h } else { -h };
                    [rho * theta.cos(), rho * theta.sin(), z]
                }
            }
            Primitive::Cone => {
                let (r, h): (f64, f64) = (0.6, 1.2);
                let slant = (r * r + h * h).sqrt();
                let lateral = PI * r * slant;
                let base = PI * r * r;
                let theta = u(rng, 0.0, 2.0 * PI);
                let rho = r * rng.gen::<f64>().sqrt();
                if u(rng, 0.0, lateral + base) < lateral {
                    // radius shrinks linearly toward the apex
                    let z = h * (1.0 - rho / r) - h / 2.0;
                    [rho * theta.cos(), rho * theta.sin(), z]
                } else {
                    [rho * theta.cos(), rho * theta.sin(), -h / 2.0]
                }
            }
            Primitive::Torus => {
                let (big, small) = (0.6, 0.25);
                let phi = loop {
                    let phi = u(rng, 0.0, 2.0 * PI);
                    if u(rng, 0.0, big + small) <= big + small * phi.cos() {
                        break phi;
                    }
                };
                let theta = u(rng, 0.0, 2.0 * PI);
                let ring = big + small * phi.cos();
                [ring * theta.cos(), ring * theta.sin(), small * phi.sin()]
            }
            Primitive::Plane => [u(rng, -0.8, 0.8), u(rng, -0.8, 0.8), 0.0],
            Primitive::Helix => {
                // thinner and taller than the cylinder so it is not a subset of it
                let t = u(rng, 0.0, 4.0 * PI);
                [0.4 * t.cos(), 0.4 * t.sin(), 1.6 * t / (4.0 * PI) - 0.8]
            }
            Primitive::Cross => {
                let axis = rng.gen_range(0..3);
                let mut p = [0.0; 3];
                p[axis] = u(rng, -0.8, 0.8);
                p
            }
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown primitive {s:?}")))
    }
}

/// Uniformly random rotation matrix from a random unit quaternion.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// One randomly rotated, jittered primitive.
pub fn gen_primitive<R: Rng + ?Sized>(
    shape: Primitive,
    n_pts: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if n_pts == 0 {
        return Err(Error::Data("cannot generate zero points".into()));
    }
    let jitter = Normal::new(0.0, noise_sigma)
        .map_err(|_| Error::Config(format!("invalid noise sigma {noise_sigma}")))?;
    let rot = random_rotation(rng);
    let mut coords = Vec::with_capacity(n_pts * 3);
    for _ in 0..n_pts {
        let p = shape.sample(rng);
        for row in &rot {
            let v = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            let noise = if noise_sigma > 0.0 {
                jitter.sample(rng)
            } else {
                0.0
            };
            coords.push(v + noise);
        }
    }
    let mut cloud = PointCloud::new(3, coords)?;
    cloud.source = Some(shape.name().to_string());
    Ok(cloud)
}

/// Synthetic task with `per_class` objects per class, split 80/20 per class.
pub fn gen_synthetic(
    task_id: usize,
    classes: &[Primitive],
    per_class: usize,
    n_pts: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<TaskDataset> {
    if classes.is_empty() {
        return Err(Error::Config("need at least one class".into()));
    }
    if per_class < 2 {
        return Err(Error::Config(format!(
            "per_class={per_class} leaves a train or test split empty"
        )));
    }
    let n_train = (per_class * 4 / 5).clamp(1, per_class - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, &shape) in classes.iter().enumerate() {
        for i in 0..per_class {
            let cloud = gen_primitive(shape, n_pts, noise_sigma, &mut rng)?;
            let s = Sample { cloud, label };
            if i < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok(TaskDataset {
        task_id,
        class_names: classes.iter().map(|c| c.name().to_string()).collect(),
        train,
        test,
    })
}

/// `n d` header, then one point per line.
pub fn write_pts(cloud: &PointCloud) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", cloud.len(), cloud.dim());
    for p in cloud.coords().chunks(cloud.dim()) {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_pts(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (hl, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(Error::Parse {
            line: hl,
            msg: format!("expected 'n d' header, got {header:?}"),
        });
    }
    let n: usize = parse_num(toks[0], hl, "point count")?;
    let d: usize = parse_num(toks[1], hl, "dimension")?;
    let mut coords = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (l, s) = lines.next().ok_or(Error::Parse {
            line: hl,
            msg: format!("expected {n} points, found {}", coords.len() / d.max(1)),
        })?;
        let vals: Vec<&str> = s.split_whitespace().collect();
        if vals.len() != d {
            return Err(Error::Parse {
                line: l,
                msg: format!("expected {d} values, got {}", vals.len()),
            });
        }
        for v in vals {
            coords.push(parse_num(v, l, "coordinate")?);
        }
    }
    PointCloud::new(d, coords).map_err(|e| Error::Parse {
        line: hl,
        msg: e.to_string(),
    })
}

/// Loads one file as a cloud of exactly `n_pts` normalized points.
///
/// OFF meshes are surface-sampled; PTS clouds with more points are reduced
/// by farthest-point sampling.
pub fn load_cloud(path: &Path, n_pts: usize, seed: u64) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let cloud = match ext {
        "off" => sample_mesh(
            &parse_off(&bytes).map_err(|e| with_path(e, path))?,
            n_pts,
            seed,
        )?,
        "pts" => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
            let c = parse_pts(text).map_err(|e| with_path(e, path))?;
            if c.len() < n_pts {
                return Err(Error::Data(format!(
                    "{} has {} points, need {n_pts}",
                    path.display(),
                    c.len()
                )));
            }
            if c.len() > n_pts {
                c.select(&farthest_point_sampling(&c, n_pts, 0)?)
            } else {
                c
            }
        }
        other => {
            return Err(Error::Data(format!(
                "unsupported extension {other:?} for {}",
                path.display()
            )))
        }
    };
    let mut cloud = normalize_unit_sphere(&cloud)?;
    cloud.source = Some(path.display().to_string());
    Ok(cloud)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { line, msg } => Error::Data(format!("{}:{line}: {msg}", path.display())),
        other => other,
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("off") | Some("pts")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Class names found under `<root>/<class>/`, sorted.
pub fn list_classes(root: &Path) -> Result<Vec<String>> {
    let mut classes: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(classes)
}

/// Builds a task from `<root>/<class>/{train,test}/*.{off,pts}`.
pub fn load_task(
    root: &Path,
    task_id: usize,
    classes: &[String],
    n_pts: usize,
    seed: u64,
) -> Result<TaskDataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for (split, out) in [("train", &mut train), ("test", &mut test)] {
            let dir = root.join(class).join(split);
            for (i, path) in sorted_files(&dir)?.iter().enumerate() {
                let cloud = load_cloud(path, n_pts, seed.wrapping_add(i as u64))?;
                out.push(Sample { cloud, label });
            }
        }
    }
    let ds = TaskDataset {
        task_id,
        class_names: classes.to_vec(),
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the directory layout as PTS files.
pub fn write_dataset(root: &Path, ds: &TaskDataset) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let mut counters = vec![0usize; ds.num_classes()];
        for s in samples {
            let class = &ds.class_names[s.label];
            let dir = root.join(class).join(split);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{class}_{:04}.pts", counters[s.label]));
            counters[s.label] += 1;
            std::fs::write(&path, write_pts(&s.cloud)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TETRA: &str =
        "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";

    #[test]
    fn parse_tetrahedron() {
        let m = parse_off(TETRA.as_bytes()).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles.len(), 4);
        let fused = TETRA.replacen("OFF\n", "OFF", 1);
        assert_eq!(parse_off(fused.as_bytes()).unwrap(), m);
        assert_eq!(parse_off(serialize_off(&m).as_bytes()).unwrap(), m);
    }

    #[test]
    fn parse_quad_is_fan_triangulated() {
        let m = parse_off(b"OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = TETRA.replace("3 1 2 3", "3 1 2 9");
        match parse_off(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_off(b"PLY\n").is_err());
        assert!(parse_off(b"OFF\n2 x 0\n").is_err());
        assert!(parse_off(b"OFF\n4 1 0\n0 0 0\n").is_err());
    }

    #[test]
    fn sample_single_triangle_stays_inside() {
        let m = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let c = sample_mesh(&m, 500, 1).unwrap();
        for p in c.coords().chunks(3) {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && p[2] == 0.0);
        }
        assert_eq!(c, sample_mesh(&m, 500, 1).unwrap());
    }

    #[test]
    fn sample_zero_area_fails() {
        let m = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert!(sample_mesh(&m, 10, 0).is_err());
    }

    #[test]
    fn sample_area_weighting_binomial() {
        // area 1 at x<=2, area 3 at x>=10
        let m = Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [16.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 10_000;
        let c = sample_mesh(&m, n, 42).unwrap();
        let big = c.coords().chunks(3).filter(|p| p[0] >= 10.0).count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((big - 7500.0).abs() < 4.0 * sd, "{big}");
    }

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(3, xs.iter().flat_map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn fps_examples() {
        let c = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(farthest_point_sampling(&c, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sampling(&c, 3, 0).unwrap(), vec![0, 3, 1]);
        let mut all = farthest_point_sampling(&c, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sampling(&c, 5, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let c = line(&[-1.0, 1.0]);
        let n = normalize_unit_sphere(&c).unwrap();
        for (a, b) in n.coords().iter().zip(c.coords()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(normalize_unit_sphere(&line(&[2.0, 2.0, 2.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r =
            PointCloud::new(3, (0..300).map(|_| rng.gen::<f64>() * 7.0 - 2.0).collect()).unwrap();
        assert!((normalize_unit_sphere(&r).unwrap().max_radius() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn split_plan_examples() {
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let plan = make_split_plan(&names, 10, 5, 3).unwrap();
        assert_eq!(plan.tasks.len(), 10);
        for t in &plan.tasks {
            let mut u = t.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 5);
        }
        assert_eq!(plan, make_split_plan(&names, 10, 5, 3).unwrap());
        assert!(make_split_plan(&names, 2, 11, 3).is_err());
    }

    #[test]
    fn synthetic_examples() {
        let ds = gen_synthetic(1, &[Primitive::Sphere], 10, 64, 0.0, 5).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (8, 2));
        for s in ds.train.iter().chain(&ds.test) {
            for p in s.cloud.coords().chunks(3) {
                assert!((norm([p[0], p[1], p[2]]) - 1.0).abs() <= 1e-9);
            }
        }
        let a = gen_synthetic(1, &[Primitive::Cube], 2, 16, 0.01, 1).unwrap();
        let b = gen_synthetic(1, &[Primitive::Cube], 2, 16, 0.01, 2).unwrap();
        assert_ne!(a.train[0].cloud, b.train[0].cloud);
        assert!("blob".parse::<Primitive>().is_err());
        assert_eq!("torus".parse::<Primitive>().unwrap(), Primitive::Torus);
    }

    #[test]
    fn pts_round_trip() {
        let c = line(&[0.125, -3.5, 1e-7]);
        assert_eq!(parse_pts(&write_pts(&c)).unwrap(), c);
        assert!(parse_pts("2 3\n1 2 3\n").is_err());
    }
}
