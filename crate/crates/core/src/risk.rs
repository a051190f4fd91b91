//! Risk instruments: empirical and disagreement risks, the discrepancy
//! distance over a restricted hypothesis class, combined errors, the
//! accumulated bound chains and the reuse ledger of a mixture.
//!
//! Every distribution is reached through a [`DistHandle`], whose sampler is
//! deterministic given a seed. Two handles sampled with the same seed see
//! the same random stream, so a handle compared with itself always gives a
//! discrepancy of exactly zero.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;

use crate::cvae::Cvae;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamState, Mlp};
use crate::seed;
use crate::task_streams::{Sample, TaskGeometry};
use crate::vae;

/// Anything that maps a feature matrix to class indices.
pub trait Classifier {
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>>;
}

/// Member of a hypothesis class: an MLP read through argmax of its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub mlp: Mlp,
}

impl Hypothesis {
    /// Single linear layer with weights `w` (`C x d`) and biases `b`.
    pub fn linear(w: Array2<f64>, b: Array1<f64>) -> Self {
        Self {
            mlp: Mlp {
                layers: vec![crate::nn::Dense {
                    w,
                    b,
                    act: Activation::Identity,
                }],
            },
        }
    }

    /// 1-D threshold: class 1 iff `x > t` (or `x < t` when `flip`).
    pub fn threshold(t: f64, flip: bool) -> Self {
        let s = if flip { -1.0 } else { 1.0 };
        Self::linear(ndarray::array![[0.0], [s]], ndarray::array![0.0, -s * t])
    }

    /// 2-D half-plane: class 1 iff `cos(a) x0 + sin(a) x1 > c`.
    pub fn halfplane(angle: f64, offset: f64) -> Self {
        Self::linear(
            ndarray::array![[0.0, 0.0], [angle.cos(), angle.sin()]],
            ndarray::array![0.0, -offset],
        )
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.mlp.forward(x)
    }
}

impl Classifier for Hypothesis {
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(vae::argmax_rows(&self.logits(x)?))
    }
}

/// Always predicts the same class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantClassifier(pub usize);

impl Classifier for ConstantClassifier {
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(vec![self.0; x.nrows()])
    }
}

/// The true labelling function of a task.
#[derive(Debug, Clone)]
pub struct TrueLabels(pub TaskGeometry);

impl Classifier for TrueLabels {
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(x.rows().into_iter().map(|r| self.0.label(&r.to_vec())).collect())
    }
}

/// Classifier head of a trained network; `p(y | x)` is averaged over
/// `n_mc` prior draws from a fixed seed, so repeated calls agree.
#[derive(Debug, Clone)]
pub struct NetClassifier {
    pub net: Cvae,
    pub n_mc: usize,
    pub seed: u64,
}

impl Classifier for NetClassifier {
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let p = self.net.predict_proba(x, self.n_mc, &mut seed::rng(self.seed))?;
        Ok(vae::argmax_rows(&p))
    }
}

/// Bounded, symmetric loss on class indices satisfying the triangle
/// inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    #[default]
    ZeroOne,
    /// `min(|a - b|, 1)` on the class indices.
    BoundedAbsolute,
}

impl Loss {
    pub fn tau(self, a: usize, b: usize) -> f64 {
        match self {
            Loss::ZeroOne => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            Loss::BoundedAbsolute => (a.abs_diff(b) as f64).min(1.0),
        }
    }

    /// Upper bound `M'`.
    pub fn bound(self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    /// A task's real distribution.
    Real,
    /// A model's approximation of a task (or a training set).
    Chain,
}

/// Source of labelled samples, deterministic given the seed.
pub trait Sampler: Send + Sync {
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>>;
}

/// Fresh draws from a task geometry, labelled by `h*`.
#[derive(Debug, Clone)]
pub struct RealSampler(pub TaskGeometry);

impl Sampler for RealSampler {
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        Ok(self.0.sample_n(n, &mut seed::rng(seed)))
    }
}

/// A fixed sample set. Asking for at least its size returns the whole set
/// in order; asking for fewer returns a seeded subset.
#[derive(Debug, Clone)]
pub struct EmpiricalSampler(pub Arc<Vec<Sample>>);

impl Sampler for EmpiricalSampler {
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        if self.0.is_empty() {
            return Err(Error::input("empirical distribution has no samples"));
        }
        if n >= self.0.len() {
            return Ok(self.0.as_ref().clone());
        }
        let mut idx = index::sample(&mut seed::rng(seed), self.0.len(), n).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| self.0[i].clone()).collect())
    }
}

#[derive(Clone)]
pub struct DistHandle {
    pub kind: DistKind,
    pub task: usize,
    pub generation: usize,
    pub n_classes: usize,
    sampler: Arc<dyn Sampler>,
}

impl fmt::Debug for DistHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistHandle")
            .field("kind", &self.kind)
            .field("task", &self.task)
            .field("generation", &self.generation)
            .finish()
    }
}

impl DistHandle {
    pub fn new(kind: DistKind, task: usize, generation: usize, n_classes: usize, sampler: Arc<dyn Sampler>) -> Self {
        Self {
            kind,
            task,
            generation,
            n_classes,
            sampler,
        }
    }

    /// `S_i` itself.
    pub fn real(task: usize, geometry: TaskGeometry) -> Self {
        let c = geometry.n_classes();
        Self::new(DistKind::Real, task, 0, c, Arc::new(RealSampler(geometry)))
    }

    pub fn empirical(kind: DistKind, task: usize, generation: usize, n_classes: usize, samples: Vec<Sample>) -> Self {
        Self::new(kind, task, generation, n_classes, Arc::new(EmpiricalSampler(Arc::new(samples))))
    }

    /// `n` labelled draws; fails when the sampler produces nothing or a
    /// label is missing or out of range.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        let s = self.sampler.sample(n, seed)?;
        if s.is_empty() {
            return Err(Error::EmptyDistribution { task: self.task });
        }
        for x in &s {
            match x.label {
                Some(y) if y < self.n_classes => {}
                other => {
                    return Err(Error::input(format!(
                        "sample label {other:?} invalid for {} classes",
                        self.n_classes
                    )))
                }
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Linear,
    Mlp { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypothesisClass {
    pub family: Family,
    pub d_x: usize,
    pub n_classes: usize,
    pub loss: Loss,
}

impl HypothesisClass {
    pub fn linear(d_x: usize, n_classes: usize) -> Self {
        Self {
            family: Family::Linear,
            d_x,
            n_classes,
            loss: Loss::ZeroOne,
        }
    }

    pub fn random_member(&self, rng: &mut seed::Rng) -> Hypothesis {
        let widths = match self.family {
            Family::Linear => vec![self.d_x, self.n_classes],
            Family::Mlp { width } => vec![self.d_x, width, self.n_classes],
        };
        Hypothesis {
            mlp: Mlp::random(&widths, Activation::Tanh, rng),
        }
    }

    /// Approximate risk minimiser within the class: softmax cross-entropy
    /// fitted by full-batch Adam.
    pub fn fit(&self, samples: &[Sample], seed: u64) -> Result<Hypothesis> {
        let x = vae::features(samples)?;
        let y = vae::one_hot(&vae::labels(samples)?, self.n_classes)?;
        let mut h = self.random_member(&mut seed::rng(seed));
        let adam = Adam {
            lr: 0.05,
            ..Adam::default()
        };
        let mut states: Vec<AdamState> = h.mlp.layers.iter().map(AdamState::new).collect();
        let inv_n = 1.0 / x.nrows() as f64;
        for _ in 0..FIT_STEPS {
            let trace = h.mlp.forward_trace(x.view())?;
            let p = softmax_rows(trace.last().expect("output"));
            let g = (&y - &p) * inv_n;
            let (grads, _) = h.mlp.backward(&trace, g.view());
            for ((layer, st), gr) in h.mlp.layers.iter_mut().zip(&mut states).zip(&grads) {
                st.ascend(&adam, layer, gr);
            }
        }
        Ok(h)
    }
}

const FIT_STEPS: usize = 300;

/// Samples used when fitting ideal classifiers.
pub const IDEAL_FIT_SAMPLES: usize = 5000;

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn mean_tau(loss: Loss, a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| loss.tau(p, q)).sum::<f64>() / a.len() as f64
}

/// `R(h, S) = mean tau(h(x), y)` over `n` draws.
pub fn empirical_risk(h: &dyn Classifier, dist: &DistHandle, n: usize, seed: u64, loss: Loss) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("empirical risk needs n >= 1"));
    }
    let s = dist.sample(n, seed)?;
    risk_on(h, &s, loss)
}

/// Risk against the labels of an already drawn sample.
pub fn risk_on(h: &dyn Classifier, samples: &[Sample], loss: Loss) -> Result<f64> {
    let x = vae::features(samples)?;
    let y = vae::labels(samples)?;
    Ok(mean_tau(loss, &h.predict(x.view())?, &y))
}

/// `R'(h1, h2, S) = mean tau(h1(x), h2(x))` over `n` draws of the marginal.
pub fn disagreement_risk(h1: &dyn Classifier, h2: &dyn Classifier, dist: &DistHandle, n: usize, seed: u64, loss: Loss) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("disagreement risk needs n >= 1"));
    }
    let x = vae::features(&dist.sample(n, seed)?)?;
    Ok(mean_tau(loss, &h1.predict(x.view())?, &h2.predict(x.view())?))
}

/// Search budget of the adversarial discrepancy estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            restarts: 8,
            steps: 300,
            lr: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub estimate: f64,
    /// Pair attaining the estimate.
    pub certificate: (Hypothesis, Hypothesis),
}

/// `|mean_A tau(h', h) - mean_B tau(h', h)|` on fixed feature matrices.
pub fn disagreement_gap(h: &dyn Classifier, h2: &dyn Classifier, xa: ArrayView2<f64>, xb: ArrayView2<f64>, loss: Loss) -> Result<f64> {
    let da = mean_tau(loss, &h.predict(xa)?, &h2.predict(xa)?);
    let db = mean_tau(loss, &h.predict(xb)?, &h2.predict(xb)?);
    Ok((da - db).abs())
}

/// Draws the two marginals with the same seed.
pub fn paired_features(a: &DistHandle, b: &DistHandle, n: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((vae::features(&a.sample(n, seed)?)?, vae::features(&b.sample(n, seed)?)?))
}

/// Soft disagreement `1 - sum_c p_c q_c` and its gradients with respect to
/// both logit matrices, scaled by `w`.
fn soft_disagreement(la: &Array2<f64>, lb: &Array2<f64>, w: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let p = softmax_rows(la);
    let q = softmax_rows(lb);
    let overlap = (&p * &q).sum_axis(Axis(1));
    let value = w * (la.nrows() as f64 - overlap.sum());
    let ov = overlap.insert_axis(Axis(1));
    let gp = -(&p * &(&q - &ov)) * w;
    let gq = -(&q * &(&p - &ov)) * w;
    (value, gp, gq)
}

struct PairState {
    h: Hypothesis,
    h2: Hypothesis,
    sh: Vec<AdamState>,
    sh2: Vec<AdamState>,
}

impl PairState {
    fn new(h: Hypothesis, h2: Hypothesis) -> Self {
        Self {
            sh: h.mlp.layers.iter().map(AdamState::new).collect(),
            sh2: h2.mlp.layers.iter().map(AdamState::new).collect(),
            h,
            h2,
        }
    }

    /// One ascent step on `sign * (soft_A - soft_B)`.
    fn step(&mut self, xa: ArrayView2<f64>, xb: ArrayView2<f64>, sign: f64, beta: f64, adam: &Adam) -> Result<()> {
        let mut grads_h = Vec::new();
        let mut grads_h2 = Vec::new();
        for (x, w) in [(xa, sign / xa.nrows() as f64), (xb, -sign / xb.nrows() as f64)] {
            let ta = self.h.mlp.forward_trace(x)?;
            let tb = self.h2.mlp.forward_trace(x)?;
            let la = ta.last().expect("output") * beta;
            let lb = tb.last().expect("output") * beta;
            let (_, gp, gq) = soft_disagreement(&la, &lb, w * beta);
            grads_h.push(self.h.mlp.backward(&ta, gp.view()).0);
            grads_h2.push(self.h2.mlp.backward(&tb, gq.view()).0);
        }
        for (net, states, grads) in [(&mut self.h, &mut self.sh, grads_h), (&mut self.h2, &mut self.sh2, grads_h2)] {
            for (i, (layer, st)) in net.mlp.layers.iter_mut().zip(states.iter_mut()).enumerate() {
                let mut g = grads[0][i].clone();
                g.add_assign(&grads[1][i]);
                st.ascend(adam, layer, &g);
            }
        }
        Ok(())
    }
}

/// Final logit scale of the surrogate; the softmax sharpens linearly from
/// 1 towards it over the ascent.
const SHARPEN: f64 = 10.0;

/// Random member whose first-layer hyperplanes pass through points drawn
/// from the pooled sample, so restarts start where the data is.
fn anchored_member(class: &HypothesisClass, xa: ArrayView2<f64>, xb: ArrayView2<f64>, rng: &mut seed::Rng) -> Hypothesis {
    let mut h = class.random_member(rng);
    let n = xa.nrows() + xb.nrows();
    let point = |rng: &mut seed::Rng| {
        let i = rng.random_range(0..n);
        if i < xa.nrows() { xa.row(i).to_owned() } else { xb.row(i - xa.nrows()).to_owned() }
    };
    let shared = (class.family == Family::Linear).then(|| point(rng));
    let first = &mut h.mlp.layers[0];
    for j in 0..first.n_out() {
        let p = shared.clone().unwrap_or_else(|| point(rng));
        first.b[j] = -first.w.row(j).dot(&p);
    }
    h
}

/// Lower estimate of `sup_{h, h'} |E_A tau(h', h) - E_B tau(h', h)|` over
/// the class: multi-restart gradient ascent on a softmax surrogate of the
/// disagreement, in both signs, keeping the best hard value seen. Labels
/// are ignored.
pub fn discrepancy(a: &DistHandle, b: &DistHandle, class: &HypothesisClass, budget: &Budget, n: usize, seed: u64) -> Result<Discrepancy> {
    let (xa, xb) = paired_features(a, b, n, seed)?;
    discrepancy_on(xa.view(), xb.view(), class, budget, seed)
}

/// As [`discrepancy`] on fixed feature matrices.
pub fn discrepancy_on(xa: ArrayView2<f64>, xb: ArrayView2<f64>, class: &HypothesisClass, budget: &Budget, seed: u64) -> Result<Discrepancy> {
    if budget.restarts == 0 || budget.steps == 0 {
        return Err(Error::config("discrepancy budget must have at least one restart and one step"));
    }
    let loss = class.loss;
    let adam = Adam {
        lr: budget.lr,
        ..Adam::default()
    };
    let mut best: Option<Discrepancy> = None;
    let mut consider = |h: &Hypothesis, h2: &Hypothesis| -> Result<()> {
        let v = disagreement_gap(h, h2, xa, xb, loss)?;
        if best.as_ref().is_none_or(|b| v > b.estimate) {
            best = Some(Discrepancy {
                estimate: v,
                certificate: (h.clone(), h2.clone()),
            });
        }
        Ok(())
    };
    for r in 0..budget.restarts {
        let mut rng = seed::rng_at(seed, &[r as u64]);
        let h = anchored_member(class, xa, xb, &mut rng);
        let h2 = anchored_member(class, xa, xb, &mut rng);
        for sign in [1.0, -1.0] {
            let mut st = PairState::new(h.clone(), h2.clone());
            consider(&st.h, &st.h2)?;
            for step in 0..budget.steps {
                let beta = 1.0 + (SHARPEN - 1.0) * step as f64 / budget.steps as f64;
                st.step(xa, xb, sign, beta, &adam)?;
                consider(&st.h, &st.h2)?;
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Exact supremum over every ordered pair of a finite class.
pub fn discrepancy_enumerated(xa: ArrayView2<f64>, xb: ArrayView2<f64>, members: &[Hypothesis], loss: Loss) -> Result<Discrepancy> {
    if members.is_empty() {
        return Err(Error::config("enumerated class is empty"));
    }
    let pa: Vec<Vec<usize>> = members.iter().map(|h| h.predict(xa)).collect::<Result<_>>()?;
    let pb: Vec<Vec<usize>> = members.iter().map(|h| h.predict(xb)).collect::<Result<_>>()?;
    let mut best = (0.0, 0, 0);
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let v = (mean_tau(loss, &pa[i], &pa[j]) - mean_tau(loss, &pb[i], &pb[j])).abs();
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    Ok(Discrepancy {
        estimate: best.0,
        certificate: (members[best.1].clone(), members[best.2].clone()),
    })
}

/// Thresholds at every midpoint of the sorted points (plus both ends), in
/// both orientations.
pub fn threshold_grid(points: &[f64]) -> Vec<Hypothesis> {
    let mut p: Vec<f64> = points.to_vec();
    p.sort_by(f64::total_cmp);
    p.dedup();
    let mut cuts = vec![p[0] - 1.0];
    cuts.extend(p.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(p[p.len() - 1] + 1.0);
    cuts.iter()
        .flat_map(|&t| [Hypothesis::threshold(t, false), Hypothesis::threshold(t, true)])
        .collect()
}

/// Half-planes over `n_angles` directions in `[0, 2 pi)` and the given
/// offsets.
pub fn halfplane_grid(n_angles: usize, offsets: &[f64]) -> Vec<Hypothesis> {
    (0..n_angles)
        .flat_map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n_angles as f64;
            offsets.iter().map(move |&c| Hypothesis::halfplane(a, c))
        })
        .collect()
}

/// The two addends of the combined error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedError {
    /// `R'(h*, h_A, A)`.
    pub source_term: f64,
    /// `R'(h_A, h_B, B)`.
    pub target_term: f64,
}

impl CombinedError {
    pub fn total(&self) -> f64 {
        self.source_term + self.target_term
    }
}

/// `sigma = R'(h*, h_A, A) + R'(h_A, h_B, B)`.
#[allow(clippy::too_many_arguments)]
pub fn combined_error(
    h_a: &dyn Classifier,
    h_b: &dyn Classifier,
    h_star: &dyn Classifier,
    dist_a: &DistHandle,
    dist_b: &DistHandle,
    n: usize,
    seed: u64,
    loss: Loss,
) -> Result<CombinedError> {
    Ok(CombinedError {
        source_term: disagreement_risk(h_star, h_a, dist_a, n, seed, loss)?,
        target_term: disagreement_risk(h_a, h_b, dist_b, n, seed, loss)?,
    })
}

/// One link `S~(k) -> S~(k+1)` of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    /// Generation `k` of the link's source.
    pub k: usize,
    pub psi: f64,
    pub sigma: CombinedError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub task: usize,
    pub links: Vec<Link>,
    /// `R'(h, h~(m), S~(m))` for the last handle of the chain.
    pub head: f64,
    /// Measured target risk `R(h, S)`.
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn accumulated(&self) -> f64 {
        self.links.iter().map(|l| l.psi + l.sigma.total()).sum()
    }
}

/// Settings shared by chain evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSettings {
    pub class: HypothesisClass,
    pub budget: Budget,
    /// Draws per risk or discrepancy evaluation.
    pub n_eval: usize,
    pub seed: u64,
}

/// Accumulated bound for one task. `chain[0]` is the real distribution and
/// `chain[k]` its `k`-th approximation; `h` is the classifier under test.
/// Labels of each chain element act as its labelling function.
pub fn bound_chain(task: usize, chain: &[DistHandle], h: &dyn Classifier, s: &ChainSettings) -> Result<BoundReport> {
    if chain.len() < 2 {
        return Err(Error::input("a bound chain needs the real distribution and at least one approximation"));
    }
    let loss = s.class.loss;
    let ideal: Vec<Hypothesis> = chain
        .iter()
        .enumerate()
        .map(|(k, d)| s.class.fit(&d.sample(IDEAL_FIT_SAMPLES, seed::derive(s.seed, &[1, k as u64]))?, seed::derive(s.seed, &[2, k as u64])))
        .collect::<Result<_>>()?;
    let eval_seed = |k: usize| seed::derive(s.seed, &[3, k as u64]);
    let mut links = Vec::with_capacity(chain.len() - 1);
    for k in 0..chain.len() - 1 {
        let psi = discrepancy(&chain[k], &chain[k + 1], &s.class, &s.budget, s.n_eval, seed::derive(s.seed, &[4, k as u64]))?.estimate;
        let sigma = CombinedError {
            source_term: empirical_risk(&ideal[k], &chain[k], s.n_eval, eval_seed(k), loss)?,
            target_term: disagreement_risk(&ideal[k], &ideal[k + 1], &chain[k + 1], s.n_eval, eval_seed(k + 1), loss)?,
        };
        links.push(Link { k, psi, sigma });
    }
    let m = chain.len() - 1;
    let head = disagreement_risk(h, &ideal[m], &chain[m], s.n_eval, eval_seed(m), loss)?;
    let lhs = empirical_risk(h, &chain[0], s.n_eval, eval_seed(0), loss)?;
    let rhs = head + links.iter().map(|l| l.psi + l.sigma.total()).sum::<f64>();
    let holds = lhs <= rhs;
    if !holds {
        log::warn!("task {task}: measured risk {lhs:.4} exceeds estimated bound {rhs:.4}");
    }
    Ok(BoundReport {
        task,
        links,
        head,
        lhs,
        rhs,
        holds,
    })
}

/// Per-task reuse counts of a mixture: `reuse_count[i]` is how many
/// training sessions the component holding task `i` went through from task
/// `i` onwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundLedger {
    pub k: usize,
    pub tasks: Vec<usize>,
    pub reuse_count: Vec<usize>,
}

impl BoundLedger {
    pub fn new(k: usize, tasks: Vec<usize>, reuse_count: Vec<usize>) -> Result<Self> {
        let l = Self { k, tasks, reuse_count };
        l.validate()?;
        Ok(l)
    }

    /// Ledger from component training histories.
    pub fn from_histories(histories: &[Vec<usize>]) -> Result<Self> {
        let mut pairs = Vec::new();
        for h in histories {
            for (pos, &task) in h.iter().enumerate() {
                pairs.push((task, h.len() - pos));
            }
        }
        pairs.sort_unstable();
        Self::new(histories.len(), pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() != self.reuse_count.len() {
            return Err(Error::input("ledger tasks and counts differ in length"));
        }
        let mut seen = self.tasks.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::input("ledger lists a task twice"));
        }
        if self.reuse_count.contains(&0) {
            return Err(Error::input("every learnt task has a reuse count of at least 1"));
        }
        if self.k == 0 || self.k > self.t() {
            return Err(Error::input(format!("ledger K = {} inconsistent with t = {}", self.k, self.t())));
        }
        if self.card_b() + self.card_b_prime() != self.t() {
            return Err(Error::input("B and B' must partition the learnt tasks"));
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.tasks.len()
    }

    /// Tasks accessed once.
    pub fn b(&self) -> Vec<usize> {
        self.filter(|c| c == 1)
    }

    /// Tasks retrained more than once.
    pub fn b_prime(&self) -> Vec<usize> {
        self.filter(|c| c > 1)
    }

    fn filter(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.tasks
            .iter()
            .zip(&self.reuse_count)
            .filter(|(_, &c)| keep(c))
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn card_b(&self) -> usize {
        self.b().len()
    }

    pub fn card_b_prime(&self) -> usize {
        self.b_prime().len()
    }

    pub fn reuse_of(&self, task: usize) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task).map(|i| self.reuse_count[i])
    }
}

/// `v = (K - card B) / (K - card B')`.
pub fn trade_off_ratio(ledger: &BoundLedger) -> Result<f64> {
    let k = ledger.k as f64;
    let denom = k - ledger.card_b_prime() as f64;
    if denom == 0.0 {
        return Err(Error::UndefinedRatio(ledger.k));
    }
    Ok((k - ledger.card_b() as f64) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Totals {
    pub single: f64,
    pub mixture: f64,
}

/// Sums the per-task right-hand sides of the single model and of the
/// mixture, checking the mixture chains against the ledger: tasks in `B`
/// have one link, tasks in `B'` have as many links as their reuse count.
pub fn lifelong_totals(single: &[BoundReport], mixture: &[BoundReport], ledger: &BoundLedger) -> Result<Totals> {
    ledger.validate()?;
    if mixture.len() != ledger.t() {
        return Err(Error::input(format!(
            "{} mixture reports for {} ledger tasks",
            mixture.len(),
            ledger.t()
        )));
    }
    for r in mixture {
        let want = ledger
            .reuse_of(r.task)
            .ok_or_else(|| Error::input(format!("task {} missing from ledger", r.task)))?;
        if r.links.len() != want {
            return Err(Error::input(format!(
                "task {} has {} links, ledger says {want}",
                r.task,
                r.links.len()
            )));
        }
    }
    Ok(Totals {
        single: single.iter().map(|r| r.rhs).sum(),
        mixture: mixture.iter().map(|r| r.rhs).sum(),
    })
}

/// Totals under each task order, computed by `run`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub order: Vec<usize>,
    pub totals: Totals,
}

/// Reruns `run` for every permutation of the stream.
pub fn order_sensitivity(
    stream: &crate::task_streams::TaskStream,
    permutations: &[Vec<usize>],
    run: &mut dyn FnMut(&crate::task_streams::TaskStream) -> Result<Totals>,
) -> Result<Vec<OrderRow>> {
    if permutations.len() < 2 {
        return Err(Error::config("order sensitivity needs at least two orders"));
    }
    permutations
        .iter()
        .map(|p| {
            Ok(OrderRow {
                order: p.clone(),
                totals: run(&stream.reordered(p)?)?,
            })
        })
        .collect()
}

/// One row of the long-format analysis table.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub experiment: String,
    pub task: usize,
    pub generation: usize,
    pub term: String,
    pub value: f64,
    pub seed: u64,
}

pub const RISK_CSV_HEADER: &str = "experiment,task,generation,term,value,seed";

pub fn write_risk_csv<W: Write>(mut w: W, rows: &[RiskRow]) -> Result<()> {
    writeln!(w, "{RISK_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.experiment, r.task, r.generation, r.term, r.value, r.seed)?;
    }
    Ok(())
}

/// Flattens a bound report into long-format rows.
pub fn report_rows(experiment: &str, r: &BoundReport, seed: u64) -> Vec<RiskRow> {
    let row = |generation: usize, term: &str, value: f64| RiskRow {
        experiment: experiment.to_string(),
        task: r.task,
        generation,
        term: term.to_string(),
        value,
        seed,
    };
    let m = r.links.len();
    let mut rows = vec![row(0, "R", r.lhs)];
    for l in &r.links {
        rows.push(row(l.k + 1, "Psi", l.psi));
        rows.push(row(l.k + 1, "sigma", l.sigma.total()));
    }
    rows.push(row(m, "R_prime", r.head));
    rows.push(row(m, "RHS", r.rhs));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn points(xs: &[f64]) -> DistHandle {
        let s = xs.iter().map(|&x| Sample::new(vec![x], Some(0))).collect();
        DistHandle::empirical(DistKind::Chain, 0, 1, 2, s)
    }

    #[test]
    fn threshold_orientation() {
        let h = Hypothesis::threshold(0.5, false);
        assert_eq!(h.predict(array![[0.0], [1.0]].view()).unwrap(), vec![0, 1]);
        let h = Hypothesis::threshold(0.5, true);
        assert_eq!(h.predict(array![[0.0], [1.0]].view()).unwrap(), vec![1, 0]);
    }

    #[test]
    fn self_discrepancy_is_zero_and_swap_is_exact() {
        let a = points(&[0.0, 1.0, 2.0]);
        let b = points(&[0.0, 5.0, 6.0]);
        let class = HypothesisClass::linear(1, 2);
        let budget = Budget {
            restarts: 2,
            steps: 30,
            lr: 0.1,
        };
        assert_eq!(discrepancy(&a, &a, &class, &budget, 3, 1).unwrap().estimate, 0.0);
        let ab = discrepancy(&a, &b, &class, &budget, 3, 1).unwrap().estimate;
        let ba = discrepancy(&b, &a, &class, &budget, 3, 1).unwrap().estimate;
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let a = points(&[0.0]);
        let class = HypothesisClass::linear(1, 2);
        let b = Budget {
            restarts: 0,
            ..Budget::default()
        };
        assert!(matches!(discrepancy(&a, &a, &class, &b, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn ratio_examples() {
        let l = BoundLedger {
            k: 4,
            tasks: vec![],
            reuse_count: vec![],
        };
        let with = |b: usize, bp: usize| BoundLedger {
            tasks: (0..b + bp).collect(),
            reuse_count: (0..b + bp).map(|i| if i < b { 1 } else { 2 }).collect(),
            ..l.clone()
        };
        assert_eq!(trade_off_ratio(&with(3, 2)).unwrap(), 0.5);
        assert_eq!(trade_off_ratio(&BoundLedger { k: 3, ..with(3, 1) }).unwrap(), 0.0);
        assert!(matches!(trade_off_ratio(&BoundLedger { k: 2, ..with(1, 2) }), Err(Error::UndefinedRatio(2))));
    }

    #[test]
    fn ledger_from_histories() {
        let l = BoundLedger::from_histories(&[vec![0, 4], vec![1], vec![2], vec![3]]).unwrap();
        assert_eq!(l.b(), vec![1, 2, 3, 4]);
        assert_eq!(l.b_prime(), vec![0]);
        assert_eq!(l.reuse_of(0), Some(2));
        let fresh = BoundLedger::from_histories(&[vec![0], vec![1], vec![2]]).unwrap();
        assert_eq!(fresh.card_b_prime(), 0);
        assert_eq!(trade_off_ratio(&fresh).unwrap(), 0.0);
    }

    #[test]
    fn empirical_sampler_returns_whole_set() {
        let d = points(&[3.0, 1.0, 2.0]);
        let s = d.sample(10, 5).unwrap();
        assert_eq!(s.iter().map(|s| s.features[0]).collect::<Vec<_>>(), vec![3.0, 1.0, 2.0]);
        assert_eq!(d.sample(2, 5).unwrap().len(), 2);
    }

    #[test]
    fn csv_header_and_rows() {
        let mut out = Vec::new();
        write_risk_csv(
            &mut out,
            &[RiskRow {
                experiment: "grm".into(),
                task: 0,
                generation: 2,
                term: "Psi".into(),
                value: 0.25,
                seed: 7,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "experiment,task,generation,term,value,seed\ngrm,0,2,Psi,0.25,7\n");
    }
}
