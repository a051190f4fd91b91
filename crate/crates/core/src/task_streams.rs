//! Synthetic lifelong-learning task sequences.
//!
//! Every task is a labelled distribution over `R^d` built from a base
//! geometry (Gaussian blobs or a family of moon-shaped arcs) and an optional
//! feature transform (permutation, planar rotation or sign inversion).
//! Labels are produced by the task's true labelling function `h*`, a
//! nearest-prototype rule in base coordinates, so `y = h*(x)` holds exactly
//! for every generated sample.
//!
//! Feature scales are chosen so that a unit-variance Gaussian decoder sees a
//! within-domain log-likelihood spread well below one nat while distinct
//! domains sit several nats apart.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

/// Norm of a domain's centre.
pub const DOMAIN_RADIUS: f64 = 2.5;
/// Distance of a class centre from its domain centre.
pub const CLASS_SPREAD: f64 = 0.6;
/// Isotropic per-coordinate noise standard deviation.
pub const NOISE_STD: f64 = 0.15;
/// Scale applied to the moon arcs before embedding.
pub const MOON_SCALE: f64 = 0.4;
/// Rotation used for the near-copy task of the MSFIR analog.
pub const NEAR_COPY_ANGLE_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: Option<usize>) -> Self {
        Self { features, label }
    }

    pub fn unlabeled(features: Vec<f64>) -> Self {
        Self {
            features,
            label: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    GaussianBlobs,
    TwoMoons,
    /// Blob geometry with features reordered: `x'[i] = x[perm[i]]`.
    PermutedFeatures(Vec<usize>),
    /// Blob geometry rotated in the plane of the first two coordinates.
    RotatedFeatures { angle_deg: f64 },
    /// Blob geometry reflected through the origin.
    InvertedFeatures,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::GaussianBlobs => "gaussian-blobs",
            Family::TwoMoons => "two-moons-variant",
            Family::PermutedFeatures(_) => "permuted-features",
            Family::RotatedFeatures { .. } => "rotated-features",
            Family::InvertedFeatures => "inverted-features",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub family: Family,
    /// Seed of the base geometry (domain centre, class centres, embedding).
    pub geometry_seed: u64,
    /// Seed of the sample draws.
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub d_x: usize,
    pub n_classes: usize,
    /// Restricts draws to a subset of the classes; `None` draws all of them.
    pub classes: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn blobs(geometry_seed: u64, seed: u64) -> Self {
        Self {
            family: Family::GaussianBlobs,
            geometry_seed,
            seed,
            n_train: 2000,
            n_test: 500,
            d_x: 8,
            n_classes: 2,
            classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::config("n_train and n_test must be at least 1"));
        }
        if self.d_x < 2 {
            return Err(Error::config(format!("d_x must be >= 2, got {}", self.d_x)));
        }
        if self.n_classes < 1 {
            return Err(Error::config("n_classes must be at least 1"));
        }
        if let Some(cs) = &self.classes {
            if cs.is_empty() {
                return Err(Error::config("class subset is empty"));
            }
            if let Some(&c) = cs.iter().find(|&&c| c >= self.n_classes) {
                return Err(Error::config(format!(
                    "class {c} out of range for {} classes",
                    self.n_classes
                )));
            }
        }
        if let Family::PermutedFeatures(p) = &self.family {
            let mut seen = vec![false; self.d_x];
            if p.len() != self.d_x || p.iter().any(|&i| i >= self.d_x || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::config("permutation is not a bijection on the feature indices"));
            }
        }
        if let Family::RotatedFeatures { angle_deg } = self.family {
            if !angle_deg.is_finite() {
                return Err(Error::config("rotation angle must be finite"));
            }
        }
        Ok(())
    }

    pub fn active_classes(&self) -> Vec<usize> {
        self.classes
            .clone()
            .unwrap_or_else(|| (0..self.n_classes).collect())
    }

    pub fn geometry(&self) -> Result<TaskGeometry> {
        self.validate()?;
        Ok(TaskGeometry::build(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Arc {
    cx: f64,
    cy: f64,
    upper: bool,
}

impl Arc {
    fn for_class(k: usize) -> Self {
        let shift = 2.5 * (k / 2) as f64;
        if k.is_multiple_of(2) {
            Arc {
                cx: shift,
                cy: 0.0,
                upper: true,
            }
        } else {
            Arc {
                cx: 1.0 + shift,
                cy: 0.5,
                upper: false,
            }
        }
    }

    fn point(&self, t: f64) -> [f64; 2] {
        let s = if self.upper { 1.0 } else { -1.0 };
        [self.cx + s * t.cos(), self.cy + s * t.sin()]
    }

    fn distance(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let on_side = if self.upper { dy >= 0.0 } else { dy <= 0.0 };
        if on_side {
            ((dx * dx + dy * dy).sqrt() - 1.0).abs()
        } else {
            let a = ((dx - 1.0).powi(2) + dy * dy).sqrt();
            let b = ((dx + 1.0).powi(2) + dy * dy).sqrt();
            a.min(b)
        }
    }

    /// Mean and second-moment matrix of the arc point with `t ~ U[0, pi]`.
    fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let s = if self.upper { 1.0 } else { -1.0 };
        let e_sin = 2.0 / PI;
        let m = [self.cx, self.cy + s * e_sin];
        let e_xx = 0.5 + self.cx * self.cx;
        let e_yy = 0.5 + 2.0 * self.cy * s * e_sin + self.cy * self.cy;
        let e_xy = self.cx * s * e_sin + self.cx * self.cy;
        (m, [[e_xx, e_xy], [e_xy, e_yy]])
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Base {
    Blobs {
        centers: Vec<Vec<f64>>,
    },
    Moons {
        center: Vec<f64>,
        basis: [Vec<f64>; 2],
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Transform {
    Identity,
    Permute(Vec<usize>),
    Rotate { cos: f64, sin: f64 },
    Negate,
}

impl Transform {
    fn apply(&self, x: &mut [f64]) {
        match self {
            Transform::Identity => {}
            Transform::Permute(p) => {
                let src = x.to_vec();
                for (dst, &i) in x.iter_mut().zip(p) {
                    *dst = src[i];
                }
            }
            Transform::Rotate { cos, sin } => {
                let (a, b) = (x[0], x[1]);
                x[0] = cos * a - sin * b;
                x[1] = sin * a + cos * b;
            }
            Transform::Negate => x.iter_mut().for_each(|v| *v = -*v),
        }
    }

    fn invert(&self, x: &mut [f64]) {
        match self {
            Transform::Identity => {}
            Transform::Permute(p) => {
                let src = x.to_vec();
                for (v, &i) in src.iter().zip(p) {
                    x[i] = *v;
                }
            }
            Transform::Rotate { cos, sin } => {
                let (a, b) = (x[0], x[1]);
                x[0] = cos * a + sin * b;
                x[1] = -sin * a + cos * b;
            }
            Transform::Negate => x.iter_mut().for_each(|v| *v = -*v),
        }
    }

    /// Matrix form, `x' = T x`.
    fn matrix(&self, d: usize) -> Vec<Vec<f64>> {
        let mut t = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            self.apply(&mut e);
            for i in 0..d {
                t[i][j] = e[i];
            }
        }
        t
    }
}

/// Sampleable realisation of a [`TaskSpec`] together with its true labeller.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGeometry {
    d_x: usize,
    n_classes: usize,
    classes: Vec<usize>,
    base: Base,
    transform: Transform,
}

fn unit_vector(rng: &mut seed::Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl TaskGeometry {
    fn build(spec: &TaskSpec) -> Self {
        let d = spec.d_x;
        let mut rng = seed::rng(spec.geometry_seed);
        let domain: Vec<f64> = unit_vector(&mut rng, d)
            .into_iter()
            .map(|v| v * DOMAIN_RADIUS)
            .collect();
        let base = match spec.family {
            Family::TwoMoons => {
                let e1 = unit_vector(&mut rng, d);
                let mut e2 = unit_vector(&mut rng, d);
                let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
                e2.iter_mut().zip(&e1).for_each(|(b, a)| *b -= dot * a);
                let n = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
                e2.iter_mut().for_each(|b| *b /= n);
                Base::Moons {
                    center: domain,
                    basis: [e1, e2],
                }
            }
            _ => {
                let centers = (0..spec.n_classes)
                    .map(|_| {
                        let u = unit_vector(&mut rng, d);
                        domain
                            .iter()
                            .zip(u)
                            .map(|(m, u)| m + CLASS_SPREAD * u)
                            .collect()
                    })
                    .collect();
                Base::Blobs { centers }
            }
        };
        let transform = match &spec.family {
            Family::GaussianBlobs | Family::TwoMoons => Transform::Identity,
            Family::PermutedFeatures(p) => Transform::Permute(p.clone()),
            Family::RotatedFeatures { angle_deg } => {
                let a = angle_deg.to_radians();
                Transform::Rotate {
                    cos: a.cos(),
                    sin: a.sin(),
                }
            }
            Family::InvertedFeatures => Transform::Negate,
        };
        Self {
            d_x: d,
            n_classes: spec.n_classes,
            classes: spec.active_classes(),
            base,
            transform,
        }
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Draws one labelled sample.
    pub fn sample(&self, rng: &mut seed::Rng) -> Sample {
        let k = self.classes[rng.random_range(0..self.classes.len())];
        let mut x = match &self.base {
            Base::Blobs { centers } => centers[k].clone(),
            Base::Moons { center, basis } => {
                let t = rng.random_range(0.0..PI);
                let p = Arc::for_class(k).point(t);
                center
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c + MOON_SCALE * (p[0] * basis[0][i] + p[1] * basis[1][i]))
                    .collect()
            }
        };
        for v in x.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += NOISE_STD * e;
        }
        self.transform.apply(&mut x);
        let y = self.label(&x);
        Sample::new(x, Some(y))
    }

    pub fn sample_n(&self, n: usize, rng: &mut seed::Rng) -> Vec<Sample> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// The true labelling function `h*`: nearest class prototype in base
    /// coordinates, restricted to the task's active classes.
    pub fn label(&self, x: &[f64]) -> usize {
        let mut u = x.to_vec();
        self.transform.invert(&mut u);
        let score = |k: usize| match &self.base {
            Base::Blobs { centers } => dist2(&u, &centers[k]),
            Base::Moons { center, basis } => {
                let rel: Vec<f64> = u.iter().zip(center).map(|(a, b)| a - b).collect();
                let p = [
                    rel.iter().zip(&basis[0]).map(|(a, b)| a * b).sum::<f64>() / MOON_SCALE,
                    rel.iter().zip(&basis[1]).map(|(a, b)| a * b).sum::<f64>() / MOON_SCALE,
                ];
                Arc::for_class(k).distance(p)
            }
        };
        let mut best = self.classes[0];
        let mut best_score = score(best);
        for &k in &self.classes[1..] {
            let s = score(k);
            if s < best_score {
                best = k;
                best_score = s;
            }
        }
        best
    }

    /// Closed-form mean vector and covariance matrix of the feature marginal.
    pub fn moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.d_x;
        let w = 1.0 / self.classes.len() as f64;
        let mut mean = vec![0.0; d];
        let mut second = vec![vec![0.0; d]; d];
        match &self.base {
            Base::Blobs { centers } => {
                for &k in &self.classes {
                    let c = &centers[k];
                    for i in 0..d {
                        mean[i] += w * c[i];
                        for j in 0..d {
                            second[i][j] += w * c[i] * c[j];
                        }
                    }
                }
            }
            Base::Moons { center, basis } => {
                // x = m + s (p0 e1 + p1 e2) with p the arc point.
                for &k in &self.classes {
                    let (pm, pp) = Arc::for_class(k).moments();
                    let embed = |v: [f64; 2], i: usize| v[0] * basis[0][i] + v[1] * basis[1][i];
                    for i in 0..d {
                        let ei = [basis[0][i], basis[1][i]];
                        let mi = center[i] + MOON_SCALE * embed(pm, i);
                        mean[i] += w * mi;
                        for j in 0..d {
                            let ej = [basis[0][j], basis[1][j]];
                            let mut epp = 0.0;
                            for a in 0..2 {
                                for b in 0..2 {
                                    epp += ei[a] * pp[a][b] * ej[b];
                                }
                            }
                            let e = center[i] * center[j]
                                + MOON_SCALE * (center[i] * embed(pm, j) + center[j] * embed(pm, i))
                                + MOON_SCALE * MOON_SCALE * epp;
                            second[i][j] += w * e;
                        }
                    }
                }
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                cov[i][j] = second[i][j] - mean[i] * mean[j];
            }
            cov[i][i] += NOISE_STD * NOISE_STD;
        }
        let t = self.transform.matrix(d);
        let tm: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| t[i][j] * mean[j]).sum())
            .collect();
        let mut tc = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        acc += t[i][a] * cov[a][b] * t[j][b];
                    }
                }
                tc[i][j] = acc;
            }
        }
        (tm, tc)
    }
}

/// Draws the train and test splits of a task. Both come from one RNG stream
/// seeded by `spec.seed`; labels are always attached.
pub fn generate_task(spec: &TaskSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let geom = spec.geometry()?;
    let mut rng = seed::rng(spec.seed);
    let train = geom.sample_n(spec.n_train, &mut rng);
    let test = geom.sample_n(spec.n_test, &mut rng);
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamKind {
    MsfirAnalog,
    PermutedAnalog,
    SplitAnalog,
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamKind::MsfirAnalog => "msfir-analog",
            StreamKind::PermutedAnalog => "permuted-analog",
            StreamKind::SplitAnalog => "split-analog",
        })
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msfir-analog" => Ok(StreamKind::MsfirAnalog),
            "permuted-analog" => Ok(StreamKind::PermutedAnalog),
            "split-analog" => Ok(StreamKind::SplitAnalog),
            other => Err(Error::config(format!("unknown stream kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOptions {
    pub d_x: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Defaults to 2 for the msfir/permuted analogs and 10 for split.
    pub n_classes: Option<usize>,
    pub supervised: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            d_x: 8,
            n_train: 2000,
            n_test: 500,
            n_classes: None,
            supervised: false,
        }
    }
}

/// Ordered sequence of tasks with a cursor over the ones learnt so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub supervised: bool,
    pub current_index: usize,
}

/// Train/test splits of one task, with labels stripped for unsupervised
/// streams.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub index: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub geometry: TaskGeometry,
}

impl TaskStream {
    /// Number of tasks `M`.
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.n_classes)
    }

    pub fn d_x(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.d_x)
    }

    /// Signals a task boundary; returns the index of the task now current.
    pub fn advance(&mut self) -> Option<usize> {
        if self.current_index < self.tasks.len() {
            self.current_index += 1;
            Some(self.current_index - 1)
        } else {
            None
        }
    }

    pub fn task_data(&self, index: usize) -> Result<TaskData> {
        let spec = self
            .tasks
            .get(index)
            .ok_or_else(|| Error::input(format!("task {index} not in stream of {}", self.len())))?;
        let (mut train, mut test) = generate_task(spec)?;
        if !self.supervised {
            train.iter_mut().chain(test.iter_mut()).for_each(|s| s.label = None);
        }
        Ok(TaskData {
            index,
            train,
            test,
            geometry: spec.geometry()?,
        })
    }

    /// Same tasks visited in a different order.
    pub fn reordered(&self, order: &[usize]) -> Result<TaskStream> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::config("task order must be a permutation of the stream"));
        }
        Ok(TaskStream {
            tasks: order.iter().map(|&i| self.tasks[i].clone()).collect(),
            current_index: 0,
            ..self.clone()
        })
    }
}

pub fn make_stream(kind: StreamKind, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    make_stream_with(kind, n_tasks, seed, &StreamOptions::default())
}

pub fn make_stream_with(
    kind: StreamKind,
    n_tasks: usize,
    seed: u64,
    opts: &StreamOptions,
) -> Result<TaskStream> {
    if n_tasks < 2 {
        return Err(Error::config(format!("a stream needs at least 2 tasks, got {n_tasks}")));
    }
    let geometry_seed = |k: usize| seed::derive(seed, &[1, k as u64]);
    let sample_seed = |k: usize| seed::derive(seed, &[2, k as u64]);
    let n_classes = opts.n_classes.unwrap_or(match kind {
        StreamKind::SplitAnalog => 10,
        _ => 2,
    });
    let spec = |family: Family, geometry: usize, k: usize| TaskSpec {
        family,
        geometry_seed: geometry_seed(geometry),
        seed: sample_seed(k),
        n_train: opts.n_train,
        n_test: opts.n_test,
        d_x: opts.d_x,
        n_classes,
        classes: None,
    };
    let tasks: Vec<TaskSpec> = match kind {
        StreamKind::MsfirAnalog => {
            // Blobs A, moons, blobs B, inverted B, near-copy of A, then
            // further unrelated blob domains.
            let copy_at = n_tasks.min(5) - 1;
            (0..n_tasks)
                .map(|k| {
                    if k == 0 {
                        spec(Family::GaussianBlobs, 0, k)
                    } else if k == copy_at {
                        spec(
                            Family::RotatedFeatures {
                                angle_deg: NEAR_COPY_ANGLE_DEG,
                            },
                            0,
                            k,
                        )
                    } else if k < copy_at {
                        match k {
                            1 => spec(Family::TwoMoons, 1, k),
                            2 => spec(Family::GaussianBlobs, 2, k),
                            _ => spec(Family::InvertedFeatures, 2, k),
                        }
                    } else {
                        spec(Family::GaussianBlobs, k, k)
                    }
                })
                .collect()
        }
        StreamKind::PermutedAnalog => (0..n_tasks)
            .map(|k| {
                if k == 0 {
                    spec(Family::GaussianBlobs, 0, k)
                } else {
                    let mut perm: Vec<usize> = (0..opts.d_x).collect();
                    perm.shuffle(&mut seed::rng_at(seed, &[3, k as u64]));
                    spec(Family::PermutedFeatures(perm), 0, k)
                }
            })
            .collect(),
        StreamKind::SplitAnalog => {
            let per = n_classes / n_tasks;
            if per < 2 {
                return Err(Error::config(format!(
                    "split stream of {n_tasks} tasks needs at least {} classes, have {n_classes}",
                    2 * n_tasks
                )));
            }
            (0..n_tasks)
                .map(|k| TaskSpec {
                    classes: Some((k * per..(k + 1) * per).collect()),
                    ..spec(Family::GaussianBlobs, 0, k)
                })
                .collect()
        }
    };
    for t in &tasks {
        t.validate()?;
    }
    Ok(TaskStream {
        kind,
        seed,
        tasks,
        supervised: opts.supervised,
        current_index: 0,
    })
}

/// Flat `key = value` form of a stream definition.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub n_tasks: usize,
    pub seed: u64,
    pub options: StreamOptions,
}

impl StreamConfig {
    pub const KEYS: [&'static str; 8] = [
        "kind",
        "n_tasks",
        "seed",
        "d_x",
        "n_train",
        "n_test",
        "n_classes",
        "supervised",
    ];

    pub fn build(&self) -> Result<TaskStream> {
        make_stream_with(self.kind, self.n_tasks, self.seed, &self.options)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("kind".to_string(), self.kind.to_string()),
            ("n_tasks".to_string(), self.n_tasks.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("d_x".to_string(), self.options.d_x.to_string()),
            ("n_train".to_string(), self.options.n_train.to_string()),
            ("n_test".to_string(), self.options.n_test.to_string()),
        ];
        if let Some(c) = self.options.n_classes {
            kv.push(("n_classes".to_string(), c.to_string()));
        }
        kv.push(("supervised".to_string(), self.options.supervised.to_string()));
        kv
    }

    /// Parses a section; `kind`, `n_tasks` and `seed` are required, unknown
    /// keys are rejected.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !Self::KEYS.contains(&k.as_str())) {
            return Err(Error::config(format!("unknown stream key `{k}`")));
        }
        let req = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::config(format!("missing key `stream.{k}`")))
        };
        let num = |k: &str, v: &str| -> Result<u64> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("`stream.{k}` expects an integer, got `{v}`")))
        };
        let defaults = StreamOptions::default();
        let opt = |k: &str, d: usize| -> Result<usize> {
            kv.get(k).map_or(Ok(d), |v| num(k, v).map(|x| x as usize))
        };
        let supervised = match kv.get("supervised").map(|s| s.trim()) {
            None => defaults.supervised,
            Some("true") => true,
            Some("false") => false,
            Some(v) => {
                return Err(Error::config(format!(
                    "`stream.supervised` expects true/false, got `{v}`"
                )))
            }
        };
        Ok(Self {
            kind: req("kind")?.trim().parse()?,
            n_tasks: num("n_tasks", req("n_tasks")?)? as usize,
            seed: num("seed", req("seed")?)?,
            options: StreamOptions {
                d_x: opt("d_x", defaults.d_x)?,
                n_train: opt("n_train", defaults.n_train)?,
                n_test: opt("n_test", defaults.n_test)?,
                n_classes: kv
                    .get("n_classes")
                    .map(|v| num("n_classes", v).map(|x| x as usize))
                    .transpose()?,
                supervised,
            },
        })
    }
}
