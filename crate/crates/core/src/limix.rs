//! The mixture learner.
//!
//! Every component is a conditional VAE whose encoder head and decoder
//! trunk are shared across the mixture. The shared layers are trained with
//! the first component and frozen from then on; each later task only moves
//! the individual layers of the component the gate picks.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::checkpoint;
use crate::cvae::{self, Arch, Batch, ClassifierHead, Cvae, ReplaySource, TrainOptions, Trainer};
use crate::error::{Error, Result};
use crate::gate::{self, Choice, GateComponent, GateConfig, IndicatorDecision};
use crate::nn::{Adam, Dense, ParamSet, Role, Tensor};
use crate::seed::{self, Rng};
use crate::stats;
use crate::task_streams::{Sample, TaskData, TaskStream};
use crate::vae;

const TAG_SHARED: u64 = 11;
const TAG_COMPONENT: u64 = 12;
const TAG_GATE: u64 = 13;
const TAG_TRAIN: u64 = 14;
const TAG_STUDENT: u64 = 15;
const TAG_ROUTE: u64 = 16;
const TAG_PREDICT: u64 = 17;
const TAG_SCORE: u64 = 18;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_z: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            d_z: 4,
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            n_mc_train: 1,
            n_mc_eval: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.d_z == 0 {
            return Err(Error::config("model.hidden and model.d_z must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("model.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.n_mc_train == 0 || self.n_mc_eval == 0 {
            return Err(Error::config("model.batch_size, n_mc_train and n_mc_eval must be positive"));
        }
        Ok(())
    }

    pub(crate) fn train_options(&self, train_shared: bool, task: usize) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: Adam {
                lr: self.lr,
                ..Adam::default()
            },
            n_mc: self.n_mc_train,
            train_shared,
            task,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub enc_head: Dense,
    pub dec_trunk: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub enc_in: Dense,
    pub dec_out: Dense,
    pub classifier: Option<ClassifierHead>,
    /// Stream task indices this component was trained on, in order.
    pub history: Vec<usize>,
    /// Classes seen in training; replay labels are drawn from these.
    pub classes: Vec<usize>,
}

impl Component {
    /// Hash over the individual parameters.
    pub fn checksum(&self) -> u64 {
        let mut parts = vec![self.enc_in.checksum(), self.dec_out.checksum()];
        if let Some(c) = &self.classifier {
            parts.push(c.hidden.checksum());
            parts.push(c.out.checksum());
        }
        parts.iter().fold(0, |acc, &p| seed::derive(acc, &[p]))
    }
}

/// Outcome of one `learn_task` call.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub task: usize,
    pub decision: IndicatorDecision,
    /// Index of the component that was trained.
    pub component: usize,
    pub expanded: bool,
    pub k_after: usize,
    /// Mean generator objective per epoch.
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub config: ModelConfig,
    pub gate: GateConfig,
    pub arch: Arch,
    pub seed: u64,
    pub shared: SharedParams,
    pub shared_frozen: bool,
    pub components: Vec<Component>,
    /// Training samples seen over the whole stream.
    pub n_seen: usize,
}

/// A frozen component as seen by the gate.
pub struct Scorer {
    pub net: Cvae,
    pub classes: Vec<usize>,
    pub n_mc: usize,
}

impl Scorer {
    fn supervised(&self) -> bool {
        self.net.classifier.is_some()
    }

    fn n_classes(&self) -> usize {
        self.net.arch().d_cond
    }

    pub fn predict_labels(&self, x: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<usize>> {
        Ok(vae::argmax_rows(&self.net.predict_proba(x, self.n_mc, rng)?))
    }

    /// Replay rows labelled by the classifier head.
    fn draw_labelled(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        if !self.supervised() {
            let x = self.net.generate(n, None, rng)?;
            return Ok(Batch { x, cond: None, labels: None });
        }
        let ys: Vec<usize> = (0..n).map(|_| self.classes[rng.random_range(0..self.classes.len())]).collect();
        let x = self.net.generate(n, Some(vae::one_hot(&ys, self.n_classes())?.view()), rng)?;
        let labels = self.predict_labels(x.view(), rng)?;
        Ok(Batch {
            cond: Some(vae::one_hot(&labels, self.n_classes())?),
            x,
            labels: Some(labels),
        })
    }
}

impl GateComponent for Scorer {
    /// Labelled samples are scored under their label; unlabelled ones under
    /// the label this component predicts.
    fn log_likelihood(&self, samples: &[Sample], seed: u64) -> Result<Vec<f64>> {
        let x = vae::features(samples)?;
        let mut rng = seed::rng(seed);
        if !self.supervised() {
            return self.net.log_likelihood(x.view(), None, self.n_mc, &mut rng);
        }
        let predicted = if samples.iter().any(|s| s.label.is_none()) {
            Some(self.predict_labels(x.view(), &mut seed::rng_at(seed, &[1]))?)
        } else {
            None
        };
        let ys: Vec<usize> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| s.label.unwrap_or_else(|| predicted.as_ref().expect("predicted")[i]))
            .collect();
        let cond = vae::one_hot(&ys, self.n_classes())?;
        self.net.log_likelihood(x.view(), Some(cond.view()), self.n_mc, &mut rng)
    }

    /// Generations conditioned on a label drawn uniformly from the classes
    /// this component has seen; the label travels with the sample.
    fn replay(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        let mut rng = seed::rng(seed);
        if !self.supervised() {
            let x = self.net.generate(n, None, &mut rng)?;
            return Ok(x.rows().into_iter().map(|r| Sample::unlabeled(r.to_vec())).collect());
        }
        let ys: Vec<usize> = (0..n).map(|_| self.classes[rng.random_range(0..self.classes.len())]).collect();
        let x = self.net.generate(n, Some(vae::one_hot(&ys, self.n_classes())?.view()), &mut rng)?;
        Ok(x.rows()
            .into_iter()
            .zip(ys)
            .map(|(r, y)| Sample::new(r.to_vec(), Some(y)))
            .collect())
    }
}

impl ReplaySource for Scorer {
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        self.draw_labelled(n, rng)
    }
}

/// Held-out metrics for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    /// Component most test samples were routed to.
    pub component: usize,
    /// Fraction of test samples routed to `component`.
    pub routed_share: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub elbo: f64,
    pub elbo_se: f64,
    pub accuracy: Option<f64>,
    pub accuracy_se: Option<f64>,
}

/// Mean accuracy over the rows of `evaluate_stream`.
pub fn average_accuracy(rows: &[TaskMetrics]) -> Option<f64> {
    let accs: Option<Vec<f64>> = rows.iter().map(|r| r.accuracy).collect();
    accs.filter(|a| !a.is_empty()).map(|a| stats::mean(&a))
}

fn strip(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().map(|s| Sample::unlabeled(s.features.clone())).collect()
}

fn group_rows(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &j) in assignment.iter().enumerate() {
        groups[j].push(i);
    }
    groups
}

impl Mixture {
    /// Empty mixture; `n_classes` makes it supervised.
    pub fn new(config: ModelConfig, gate: GateConfig, d_x: usize, n_classes: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        gate.validate()?;
        let arch = Arch {
            d_x,
            d_cond: n_classes.unwrap_or(0),
            hidden: config.hidden,
            d_z: config.d_z,
            n_classes,
        };
        let init = Cvae::random(&arch, &mut seed::rng_at(seed, &[TAG_SHARED]))?;
        Ok(Self {
            config,
            gate,
            arch,
            seed,
            shared: SharedParams {
                enc_head: init.enc_head,
                dec_trunk: init.dec_trunk,
            },
            shared_frozen: false,
            components: Vec::new(),
            n_seen: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn supervised(&self) -> bool {
        self.arch.n_classes.is_some()
    }

    /// Shared plus individual parameters of component `j` as one network.
    pub fn net(&self, j: usize) -> Result<Cvae> {
        let c = self
            .components
            .get(j)
            .ok_or_else(|| Error::input(format!("component {j} out of range for K = {}", self.k())))?;
        Ok(Cvae {
            enc_in: c.enc_in.clone(),
            enc_head: self.shared.enc_head.clone(),
            dec_trunk: self.shared.dec_trunk.clone(),
            dec_out: c.dec_out.clone(),
            classifier: c.classifier.clone(),
        })
    }

    pub fn scorer(&self, j: usize) -> Result<Scorer> {
        Ok(Scorer {
            net: self.net(j)?,
            classes: self.components[j].classes.clone(),
            n_mc: self.config.n_mc_eval,
        })
    }

    fn scorers(&self) -> Result<Vec<Scorer>> {
        (0..self.k()).map(|j| self.scorer(j)).collect()
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.components.iter().map(Component::checksum).collect()
    }

    /// Index of the component whose history contains `task`.
    pub fn component_of(&self, task: usize) -> Option<usize> {
        self.components.iter().position(|c| c.history.contains(&task))
    }

    /// Stream indices of every task learnt so far, ascending.
    pub fn tasks_learnt(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.components.iter().flat_map(|c| c.history.iter().copied()).collect();
        set.into_iter().collect()
    }

    fn training_batch(&self, train: &[Sample]) -> Result<Batch> {
        let x = vae::features(train)?;
        if x.ncols() != self.arch.d_x {
            return Err(Error::Shape {
                context: "training features".into(),
                expected: self.arch.d_x,
                got: x.ncols(),
            });
        }
        if !self.supervised() {
            return Ok(Batch { x, cond: None, labels: None });
        }
        let labels = vae::labels(train)?;
        Ok(Batch {
            cond: Some(vae::one_hot(&labels, self.arch.d_cond)?),
            x,
            labels: Some(labels),
        })
    }

    /// Learns one task: the gate picks or creates a component, which is then
    /// trained on `train` (plus its own replay when it already served an
    /// earlier task).
    pub fn learn_task(&mut self, task: usize, train: &[Sample]) -> Result<GateRecord> {
        self.learn_task_with(task, train, &mut |_, _, _| Ok(()))
    }

    /// As [`Mixture::learn_task`], calling `on_epoch(epoch, component,
    /// network)` after every epoch.
    pub fn learn_task_with(
        &mut self,
        task: usize,
        train: &[Sample],
        on_epoch: &mut dyn FnMut(usize, usize, &Cvae) -> Result<()>,
    ) -> Result<GateRecord> {
        if train.is_empty() {
            return Err(Error::input("learn_task needs training samples"));
        }
        let data = self.training_batch(train)?;
        let group = &train[..self.gate.n_g.min(train.len())];
        let gate_cfg = GateConfig {
            n_total: self.n_seen + group.len(),
            ..self.gate
        };
        let scorers = self.scorers()?;
        let refs: Vec<&dyn GateComponent> = scorers.iter().map(|s| s as &dyn GateComponent).collect();
        let decision = gate::task_indicator(&gate_cfg, group, &refs, seed::derive(self.seed, &[TAG_GATE, task as u64]))?;
        let expanded = decision.chosen == Choice::New;
        let j = decision.chosen.index(self.k());
        if expanded {
            let fresh = Cvae::random(&self.arch, &mut seed::rng_at(self.seed, &[TAG_COMPONENT, j as u64]))?;
            self.components.push(Component {
                enc_in: fresh.enc_in,
                dec_out: fresh.dec_out,
                classifier: fresh.classifier,
                history: Vec::new(),
                classes: Vec::new(),
            });
        }
        let frozen = if expanded { None } else { Some(self.scorer(j)?) };
        let mut net = self.net(j)?;
        let train_shared = !self.shared_frozen;
        let opts = self.config.train_options(train_shared, task);
        let mut rng = seed::rng_at(self.seed, &[TAG_TRAIN, task as u64]);
        let objective = cvae::train(
            &mut net,
            &data,
            &opts,
            frozen.as_ref().map(|f| f as &dyn ReplaySource),
            &mut rng,
            &mut |epoch, n| on_epoch(epoch, j, n),
        )?;
        log::info!(
            "task {task}: {} component {j} (K = {}), p = {:?}",
            if expanded { "new" } else { "reused" },
            self.k(),
            decision.probs
        );
        let comp = &mut self.components[j];
        comp.enc_in = net.enc_in;
        comp.dec_out = net.dec_out;
        comp.classifier = net.classifier;
        comp.history.push(task);
        if let Some(labels) = &data.labels {
            let mut classes: BTreeSet<usize> = comp.classes.iter().copied().collect();
            classes.extend(labels.iter().copied());
            comp.classes = classes.into_iter().collect();
        }
        if train_shared {
            self.shared.enc_head = net.enc_head;
            self.shared.dec_trunk = net.dec_trunk;
            self.shared_frozen = true;
        }
        self.n_seen += train.len();
        Ok(GateRecord {
            task,
            decision,
            component: j,
            expanded,
            k_after: self.k(),
            objective,
        })
    }

    /// Test-time routing: for each sample the existing component with the
    /// smallest knowledge affinity (lowest index on ties). Labels are
    /// ignored.
    pub fn select_component(&self, samples: &[Sample], seed: u64) -> Result<Vec<usize>> {
        if self.k() == 0 {
            return Err(Error::input("mixture has no components"));
        }
        if self.k() == 1 {
            return Ok(vec![0; samples.len()]);
        }
        let scorers = self.scorers()?;
        let refs: Vec<&dyn GateComponent> = scorers.iter().map(|s| s as &dyn GateComponent).collect();
        let rows = gate::affinity_matrix(&strip(samples), &refs, seed::derive(seed, &[TAG_ROUTE]))?;
        Ok(rows
            .iter()
            .map(|r| gate::argmin_affinity(r).expect("K >= 1"))
            .collect())
    }

    /// Routed class probabilities.
    pub fn predict(&self, samples: &[Sample], seed: u64) -> Result<Array2<f64>> {
        if !self.supervised() {
            return Err(Error::Mode);
        }
        let route = self.select_component(samples, seed)?;
        self.predict_routed(samples, &route, seed)
    }

    fn predict_routed(&self, samples: &[Sample], route: &[usize], seed: u64) -> Result<Array2<f64>> {
        let x = vae::features(samples)?;
        let mut out = Array2::zeros((samples.len(), self.arch.d_cond));
        for (j, rows) in group_rows(route, self.k()).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xs = x.select(Axis(0), &rows);
            let p = self
                .net(j)?
                .predict_proba(xs.view(), self.config.n_mc_eval, &mut seed::rng_at(seed, &[TAG_PREDICT, j as u64]))?;
            for (r, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&p.row(r));
            }
        }
        Ok(out)
    }

    /// Routed reconstructions (decoder mean at the posterior mean) and the
    /// per-sample mean squared error.
    pub fn reconstruct(&self, samples: &[Sample], seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
        let route = self.select_component(samples, seed)?;
        self.reconstruct_routed(samples, &route, seed)
    }

    fn reconstruct_routed(&self, samples: &[Sample], route: &[usize], seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
        let x = vae::features(samples)?;
        let mut out = Array2::zeros(x.raw_dim());
        for (j, rows) in group_rows(route, self.k()).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xs = x.select(Axis(0), &rows);
            let net = self.net(j)?;
            let cond = if self.supervised() {
                let scorer = self.scorer(j)?;
                let ys = scorer.predict_labels(xs.view(), &mut seed::rng_at(seed, &[TAG_PREDICT, j as u64]))?;
                Some(vae::one_hot(&ys, self.arch.d_cond)?)
            } else {
                None
            };
            let xhat = vae::reconstruct_mean(net.vae(), xs.view(), cond.as_ref().map(|c| c.view()))?;
            for (r, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&xhat.row(r));
            }
        }
        let mse = (&x - &out)
            .rows()
            .into_iter()
            .map(|r| r.dot(&r) / r.len() as f64)
            .collect();
        Ok((out, mse))
    }

    /// Routed log-likelihood bound of each sample (under its own label when
    /// it has one).
    pub fn log_likelihood(&self, samples: &[Sample], seed: u64) -> Result<Vec<f64>> {
        let route = self.select_component(samples, seed)?;
        self.log_likelihood_routed(samples, &route, seed)
    }

    fn log_likelihood_routed(&self, samples: &[Sample], route: &[usize], seed: u64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; samples.len()];
        for (j, rows) in group_rows(route, self.k()).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let subset: Vec<Sample> = rows.iter().map(|&i| samples[i].clone()).collect();
            let ll = self
                .scorer(j)?
                .log_likelihood(&subset, seed::derive(seed, &[TAG_SCORE, j as u64]))?;
            for (r, &i) in rows.iter().enumerate() {
                out[i] = ll[r];
            }
        }
        Ok(out)
    }

    /// Held-out metrics of one task, routed per sample.
    pub fn evaluate_task(&self, data: &TaskData, seed: u64) -> Result<TaskMetrics> {
        let route = self.select_component(&data.test, seed)?;
        self.evaluate_route(data, route, seed)
    }

    /// Held-out metrics of one task with every sample sent to the component
    /// that learnt it.
    pub fn evaluate_owned(&self, data: &TaskData, seed: u64) -> Result<TaskMetrics> {
        let j = self
            .component_of(data.index)
            .ok_or_else(|| Error::input(format!("task {} was not learnt", data.index)))?;
        self.evaluate_route(data, vec![j; data.test.len()], seed)
    }

    fn evaluate_route(&self, data: &TaskData, route: Vec<usize>, seed: u64) -> Result<TaskMetrics> {
        let test = &data.test;
        let mut counts = vec![0usize; self.k()];
        route.iter().for_each(|&j| counts[j] += 1);
        let component = (0..self.k()).fold(0, |b, j| if counts[j] > counts[b] { j } else { b });
        let (_, mse) = self.reconstruct_routed(test, &route, seed)?;
        let elbo = self.log_likelihood_routed(test, &route, seed)?;
        let (accuracy, accuracy_se) = if self.supervised() && test.iter().all(|s| s.label.is_some()) {
            let p = self.predict_routed(test, &route, seed)?;
            let hits: Vec<f64> = vae::argmax_rows(&p)
                .iter()
                .zip(test)
                .map(|(&y, s)| if Some(y) == s.label { 1.0 } else { 0.0 })
                .collect();
            (Some(stats::mean(&hits)), Some(stats::std_err(&hits)))
        } else {
            (None, None)
        };
        Ok(TaskMetrics {
            task: data.index,
            component,
            routed_share: counts[component] as f64 / test.len() as f64,
            mse: stats::mean(&mse),
            mse_se: stats::std_err(&mse),
            elbo: stats::mean(&elbo),
            elbo_se: stats::std_err(&elbo),
            accuracy,
            accuracy_se,
        })
    }

    /// Metrics for every task learnt so far, in stream order.
    pub fn evaluate_stream(&self, stream: &TaskStream, seed: u64) -> Result<Vec<TaskMetrics>> {
        self.tasks_learnt()
            .into_iter()
            .map(|t| self.evaluate_task(&stream.task_data(t)?, seed::derive(seed, &[t as u64])))
            .collect()
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new(Role::Individual);
        let c = &self.config;
        let g = &self.gate;
        let header = vec![
            self.k() as f64,
            self.arch.d_x as f64,
            self.arch.n_classes.unwrap_or(0) as f64,
            c.hidden as f64,
            c.d_z as f64,
            c.lr,
            c.epochs as f64,
            c.batch_size as f64,
            c.n_mc_train as f64,
            c.n_mc_eval as f64,
            g.a,
            g.v,
            g.n_g as f64,
            self.n_seen as f64,
            if self.shared_frozen { 1.0 } else { 0.0 },
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
        ];
        ps.tensors.push(Tensor {
            name: "mixture.header".into(),
            shape: vec![header.len()],
            data: header,
        });
        self.shared.enc_head.write_tensors("shared.enc_head", &mut ps);
        self.shared.dec_trunk.write_tensors("shared.dec_trunk", &mut ps);
        for (j, comp) in self.components.iter().enumerate() {
            let p = format!("component{j}");
            comp.enc_in.write_tensors(&format!("{p}.enc_in"), &mut ps);
            comp.dec_out.write_tensors(&format!("{p}.dec_out"), &mut ps);
            if let Some(cls) = &comp.classifier {
                cls.hidden.write_tensors(&format!("{p}.cls_hidden"), &mut ps);
                cls.out.write_tensors(&format!("{p}.cls_out"), &mut ps);
            }
            for (name, v) in [("history", &comp.history), ("classes", &comp.classes)] {
                ps.tensors.push(Tensor {
                    name: format!("{p}.{name}"),
                    shape: vec![v.len()],
                    data: v.iter().map(|&t| t as f64).collect(),
                });
            }
        }
        ps
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        let h = &ps.get("mixture.header")?.data;
        if h.len() != 17 {
            return Err(Error::Format(format!("mixture header has {} entries, expected 17", h.len())));
        }
        let u = |v: f64| v as usize;
        let n_classes = if h[2] > 0.0 { Some(u(h[2])) } else { None };
        let config = ModelConfig {
            hidden: u(h[3]),
            d_z: u(h[4]),
            lr: h[5],
            epochs: u(h[6]),
            batch_size: u(h[7]),
            n_mc_train: u(h[8]),
            n_mc_eval: u(h[9]),
        };
        let gate = GateConfig {
            a: h[10],
            v: h[11],
            n_g: u(h[12]),
            n_total: 0,
        };
        let seed = ((h[15] as u64) << 32) | h[16] as u64;
        let mut mix = Mixture::new(config, gate, u(h[1]), n_classes, seed)?;
        mix.n_seen = u(h[13]);
        mix.shared_frozen = h[14] != 0.0;
        mix.shared = SharedParams {
            enc_head: Dense::read_tensors("shared.enc_head", ps)?,
            dec_trunk: Dense::read_tensors("shared.dec_trunk", ps)?,
        };
        let as_indices = |name: &str| -> Result<Vec<usize>> { Ok(ps.get(name)?.data.iter().map(|&v| v as usize).collect()) };
        for j in 0..u(h[0]) {
            let p = format!("component{j}");
            let classifier = if n_classes.is_some() {
                Some(ClassifierHead {
                    hidden: Dense::read_tensors(&format!("{p}.cls_hidden"), ps)?,
                    out: Dense::read_tensors(&format!("{p}.cls_out"), ps)?,
                })
            } else {
                None
            };
            mix.components.push(Component {
                enc_in: Dense::read_tensors(&format!("{p}.enc_in"), ps)?,
                dec_out: Dense::read_tensors(&format!("{p}.dec_out"), ps)?,
                classifier,
                history: as_indices(&format!("{p}.history"))?,
                classes: as_indices(&format!("{p}.classes"))?,
            });
        }
        for c in &mix.components {
            if c.enc_in.n_in() != mix.arch.d_x + mix.arch.d_cond || c.dec_out.n_in() != mix.shared.dec_trunk.n_out() {
                return Err(Error::Format("component shapes do not match the shared layers".into()));
            }
        }
        Ok(mix)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(&checkpoint::load(path)?)
    }
}

/// Single unconditional network distilled from the mixture. It carries its
/// own copy of the shared layers, which stay frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub net: Cvae,
}

impl StudentModel {
    /// Fresh individual layers on top of the mixture's shared layers.
    pub fn new(mix: &Mixture, seed: u64) -> Result<Self> {
        if mix.supervised() {
            return Err(Error::config("the student is only defined for unsupervised mixtures"));
        }
        let fresh = Cvae::random(&mix.arch, &mut seed::rng_at(seed, &[TAG_STUDENT]))?;
        Ok(Self {
            net: Cvae {
                enc_head: mix.shared.enc_head.clone(),
                dec_trunk: mix.shared.dec_trunk.clone(),
                ..fresh
            },
        })
    }

    /// Copy of component `j`.
    pub fn from_component(mix: &Mixture, j: usize) -> Result<Self> {
        if mix.supervised() {
            return Err(Error::config("the student is only defined for unsupervised mixtures"));
        }
        Ok(Self { net: mix.net(j)? })
    }

    pub fn log_likelihood(&self, samples: &[Sample], n_mc: usize, seed: u64) -> Result<Vec<f64>> {
        let x = vae::features(samples)?;
        self.net.log_likelihood(x.view(), None, n_mc, &mut seed::rng(seed))
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new(Role::Student);
        self.net.write_tensors("student", &mut ps);
        ps
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        Ok(Self {
            net: Cvae::read_tensors("student", ps)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(&checkpoint::load(path)?)
    }
}

/// Distils every component, plus the current task's data, into the student.
/// Each epoch draws `n_replay_per_component` fresh generations from every
/// component. Returns the mean ELBO per epoch.
pub fn distill_student(
    student: &mut StudentModel,
    mix: &Mixture,
    current_task_train: &[Sample],
    n_replay_per_component: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut data = Batch {
        x: vae::features(current_task_train)?,
        cond: None,
        labels: None,
    };
    if mix.supervised() {
        return Err(Error::config("the student is only defined for unsupervised mixtures"));
    }
    let opts = mix.config.train_options(false, usize::MAX);
    let mut trainer = Trainer::new(&student.net, opts)?;
    let mut rng = seed::rng_at(seed, &[TAG_STUDENT]);
    let nets: Vec<Cvae> = (0..mix.k()).map(|j| mix.net(j)).collect::<Result<_>>()?;
    let base = data.x.clone();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut rows = vec![base.view()];
        let replays: Vec<Array2<f64>> = if n_replay_per_component > 0 {
            nets.iter()
                .map(|n| n.generate(n_replay_per_component, None, &mut rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        rows.extend(replays.iter().map(|r| r.view()));
        data.x = ndarray::concatenate(Axis(0), &rows).map_err(|e| Error::input(e.to_string()))?;
        history.push(trainer.epoch(&mut student.net, &data, None, &mut rng)?);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_streams::{generate_task, TaskSpec};

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            d_z: 2,
            epochs: 2,
            n_mc_eval: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn first_task_expands_and_freezes_shared() {
        let (train, _) = generate_task(&TaskSpec {
            n_train: 128,
            n_test: 10,
            ..TaskSpec::blobs(1, 2)
        })
        .unwrap();
        let mut mix = Mixture::new(small_config(), GateConfig::default(), 8, None, 3).unwrap();
        let rec = mix.learn_task(0, &strip(&train)).unwrap();
        assert!(rec.expanded);
        assert_eq!(mix.k(), 1);
        assert!(mix.shared_frozen);
        assert_eq!(mix.select_component(&train[..3], 0).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn predict_needs_labels() {
        let mix = Mixture::new(small_config(), GateConfig::default(), 8, None, 3).unwrap();
        assert!(matches!(mix.predict(&[], 0), Err(Error::Mode)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (train, _) = generate_task(&TaskSpec {
            n_train: 64,
            n_test: 10,
            ..TaskSpec::blobs(1, 2)
        })
        .unwrap();
        let mut mix = Mixture::new(small_config(), GateConfig::default(), 8, Some(2), 9).unwrap();
        mix.learn_task(0, &train).unwrap();
        let back = Mixture::from_params(&mix.to_params()).unwrap();
        assert_eq!(back, mix);
    }
}
