//! Single-model generative replay.
//!
//! One conditional VAE with a classifier head learns every task. Its
//! condition is the label one-hot followed by a one-hot of the task's
//! position in the stream, so generations can be requested per task. From
//! the second task on, every mini-batch is topped up with rows generated by
//! a frozen copy of the model as it was before the task started.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::checkpoint;
use crate::cvae::{self, Arch, Batch, Cvae, ReplaySource};
use crate::error::{Error, Result};
use crate::limix::ModelConfig;
use crate::nn::{ParamSet, Role, Tensor};
use crate::risk::{DistHandle, DistKind, NetClassifier, Sampler};
use crate::seed::{self, Rng};
use crate::stats;
use crate::task_streams::{Sample, TaskData};
use crate::vae;

const TAG_INIT: u64 = 21;
const TAG_TRAIN: u64 = 22;
const TAG_EVAL: u64 = 23;

/// Parameter count of one supervised mixture component.
pub fn component_params(config: &ModelConfig, d_x: usize, n_classes: usize) -> usize {
    arch_params(&Arch {
        d_x,
        d_cond: n_classes,
        hidden: config.hidden,
        d_z: config.d_z,
        n_classes: Some(n_classes),
    })
}

fn arch_params(a: &Arch) -> usize {
    let dense = |i: usize, o: usize| (i + 1) * o;
    let c = a.n_classes.unwrap_or(0);
    dense(a.d_x + a.d_cond, a.hidden)
        + dense(a.hidden, 2 * a.d_z)
        + dense(a.d_z + a.d_cond, a.hidden)
        + dense(a.hidden, a.d_x)
        + if c > 0 { dense(a.d_x + a.d_z, a.hidden) + dense(a.hidden, c) } else { 0 }
}

/// Hidden width whose parameter count is closest to `target`.
pub fn parity_hidden(target: usize, d_x: usize, d_cond: usize, d_z: usize, n_classes: usize) -> usize {
    let count = |h: usize| {
        arch_params(&Arch {
            d_x,
            d_cond,
            hidden: h,
            d_z,
            n_classes: Some(n_classes),
        })
    };
    (1..=target.max(1))
        .min_by_key(|&h| count(h).abs_diff(target))
        .expect("non-empty range")
}

/// Tolerated relative gap between the baseline and one component.
pub const PARITY_TOLERANCE: f64 = 0.01;

/// Perfect task inference: generated rows carry the task code they were
/// conditioned on, so only codes of learnt tasks are recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskOracle {
    pub n_known: usize,
}

impl TaskOracle {
    pub fn task_of(&self, code: usize) -> Result<usize> {
        if code < self.n_known {
            Ok(code)
        } else {
            Err(Error::EmptyDistribution { task: code })
        }
    }
}

/// Per-task generations of a frozen network, labelled by its classifier.
#[derive(Debug, Clone)]
pub struct GeneratedSampler {
    pub net: Cvae,
    pub task: usize,
    pub classes: Vec<usize>,
    pub n_classes: usize,
    pub max_tasks: usize,
    pub n_mc: usize,
}

fn condition(labels: &[usize], tasks: &[usize], n_classes: usize, max_tasks: usize) -> Result<Array2<f64>> {
    let y = vae::one_hot(labels, n_classes)?;
    let t = vae::one_hot(tasks, max_tasks)?;
    Ok(concatenate(Axis(1), &[y.view(), t.view()]).expect("same row count"))
}

/// Condition rows for labels `labels`, all from task `task`.
pub fn task_condition(labels: &[usize], task: usize, n_classes: usize, max_tasks: usize) -> Result<Array2<f64>> {
    condition(labels, &vec![task; labels.len()], n_classes, max_tasks)
}

/// Draws `(x, label)` rows for the given task codes; labels come from the
/// network's own classifier.
fn generate_rows(net: &Cvae, tasks: &[usize], classes: &[Vec<usize>], n_classes: usize, max_tasks: usize, n_mc: usize, rng: &mut Rng) -> Result<(Array2<f64>, Vec<usize>)> {
    let ys: Vec<usize> = tasks
        .iter()
        .map(|&t| classes[t][rng.random_range(0..classes[t].len())])
        .collect();
    let x = net.generate(tasks.len(), Some(condition(&ys, tasks, n_classes, max_tasks)?.view()), rng)?;
    let labels = vae::argmax_rows(&net.predict_proba(x.view(), n_mc, rng)?);
    Ok((x, labels))
}

impl Sampler for GeneratedSampler {
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut classes = vec![Vec::new(); self.max_tasks];
        classes[self.task] = self.classes.clone();
        let tasks = vec![self.task; n];
        let (x, y) = generate_rows(&self.net, &tasks, &classes, self.n_classes, self.max_tasks, self.n_mc, &mut seed::rng(seed))?;
        Ok(x.rows()
            .into_iter()
            .zip(y)
            .map(|(r, y)| Sample::new(r.to_vec(), Some(y)))
            .collect())
    }
}

/// Frozen pre-task copy used for replay.
struct FrozenCopy {
    net: Cvae,
    classes: Vec<Vec<usize>>,
    n_classes: usize,
    max_tasks: usize,
    n_mc: usize,
}

impl ReplaySource for FrozenCopy {
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        let tasks: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.classes.len())).collect();
        let (x, labels) = generate_rows(&self.net, &tasks, &self.classes, self.n_classes, self.max_tasks, self.n_mc, rng)?;
        Ok(Batch {
            x,
            cond: Some(condition(&labels, &tasks, self.n_classes, self.max_tasks)?),
            labels: Some(labels),
        })
    }
}

/// Held-out classification metrics of the baseline on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GrmMetrics {
    pub task: usize,
    pub accuracy: f64,
    pub accuracy_se: f64,
    pub elbo: f64,
    pub elbo_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrmModel {
    pub config: ModelConfig,
    pub arch: Arch,
    pub n_classes: usize,
    pub max_tasks: usize,
    pub seed: u64,
    pub net: Cvae,
    /// Classes observed in each learnt task, in stream order.
    pub task_classes: Vec<Vec<usize>>,
    /// The network after each learnt task.
    pub snapshots: Vec<Cvae>,
}

impl GrmModel {
    /// Builds a baseline sized to match one supervised mixture component.
    pub fn new(config: ModelConfig, d_x: usize, n_classes: usize, max_tasks: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 || max_tasks == 0 {
            return Err(Error::config("the baseline needs at least one class and one task"));
        }
        let target = component_params(&config, d_x, n_classes);
        let d_cond = n_classes + max_tasks;
        let hidden = parity_hidden(target, d_x, d_cond, config.d_z, n_classes);
        let arch = Arch {
            d_x,
            d_cond,
            hidden,
            d_z: config.d_z,
            n_classes: Some(n_classes),
        };
        let got = arch_params(&arch);
        let gap = got.abs_diff(target) as f64 / target as f64;
        if gap > PARITY_TOLERANCE {
            return Err(Error::config(format!(
                "no hidden width brings the baseline within 1% of a component ({got} vs {target} parameters)"
            )));
        }
        let net = Cvae::random(&arch, &mut seed::rng_at(seed, &[TAG_INIT]))?;
        Ok(Self {
            config,
            arch,
            n_classes,
            max_tasks,
            seed,
            net,
            task_classes: Vec::new(),
            snapshots: Vec::new(),
        })
    }

    /// Tasks learnt so far.
    pub fn t(&self) -> usize {
        self.task_classes.len()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn oracle(&self) -> TaskOracle {
        TaskOracle { n_known: self.t() }
    }

    pub fn classifier(&self, seed: u64) -> NetClassifier {
        NetClassifier {
            net: self.net.clone(),
            n_mc: self.config.n_mc_eval,
            seed,
        }
    }

    fn batch(&self, train: &[Sample], task: usize) -> Result<Batch> {
        let x = vae::features(train)?;
        if x.ncols() != self.arch.d_x {
            return Err(Error::Shape {
                context: "baseline training data".into(),
                expected: self.arch.d_x,
                got: x.ncols(),
            });
        }
        if train.iter().any(|s| s.label.is_none()) {
            return Err(Error::Mode);
        }
        let labels = vae::labels(train)?;
        let cond = condition(&labels, &vec![task; labels.len()], self.n_classes, self.max_tasks)?;
        Ok(Batch {
            x,
            cond: Some(cond),
            labels: Some(labels),
        })
    }

    pub fn learn_task(&mut self, train: &[Sample]) -> Result<Vec<f64>> {
        self.learn_task_with(train, &mut |_, _| Ok(()))
    }

    /// Trains on the next task, calling `on_epoch(epoch, network)` after
    /// every epoch. Every parameter is updated.
    pub fn learn_task_with(&mut self, train: &[Sample], on_epoch: &mut dyn FnMut(usize, &Cvae) -> Result<()>) -> Result<Vec<f64>> {
        let task = self.t();
        if task >= self.max_tasks {
            return Err(Error::config(format!("the baseline was sized for {} tasks", self.max_tasks)));
        }
        if train.is_empty() {
            return Err(Error::input("learn_task needs training samples"));
        }
        let data = self.batch(train, task)?;
        let frozen = (task > 0).then(|| FrozenCopy {
            net: self.net.clone(),
            classes: self.task_classes.clone(),
            n_classes: self.n_classes,
            max_tasks: self.max_tasks,
            n_mc: self.config.n_mc_eval,
        });
        let opts = self.config.train_options(true, task);
        let mut rng = seed::rng_at(self.seed, &[TAG_TRAIN, task as u64]);
        let objective = cvae::train(
            &mut self.net,
            &data,
            &opts,
            frozen.as_ref().map(|f| f as &dyn ReplaySource),
            &mut rng,
            on_epoch,
        )?;
        let classes: BTreeSet<usize> = data.labels.as_ref().expect("labelled").iter().copied().collect();
        self.task_classes.push(classes.into_iter().collect());
        self.snapshots.push(self.net.clone());
        log::info!("baseline task {task}: final objective {:.4}", objective.last().copied().unwrap_or(f64::NAN));
        Ok(objective)
    }

    /// Handle for generation `generation` of task `task`'s approximation.
    /// Generation 1 is the task's own training set; generation `k >= 2` is
    /// drawn from the model as it stood after task `task + k - 1`.
    pub fn snapshot_distribution(&self, task: usize, generation: usize, train: &[Sample]) -> Result<DistHandle> {
        let task = self.oracle().task_of(task)?;
        match generation {
            0 => Err(Error::input("generation 0 is the real distribution")),
            1 => {
                if train.iter().any(|s| s.label.is_none()) {
                    return Err(Error::Mode);
                }
                Ok(DistHandle::empirical(DistKind::Chain, task, 1, self.n_classes, train.to_vec()))
            }
            k => {
                let after = task + k - 1;
                let net = self.snapshots.get(after).ok_or_else(|| {
                    Error::input(format!("generation {k} of task {task} needs {} learnt tasks, have {}", after + 1, self.t()))
                })?;
                let sampler = GeneratedSampler {
                    net: net.clone(),
                    task,
                    classes: self.task_classes[task].clone(),
                    n_classes: self.n_classes,
                    max_tasks: self.max_tasks,
                    n_mc: self.config.n_mc_eval,
                };
                Ok(DistHandle::new(DistKind::Chain, task, k, self.n_classes, Arc::new(sampler)))
            }
        }
    }

    /// `S_i` followed by every approximation generation up to the current
    /// model: `t - i + 1` handles after the real one.
    pub fn chain(&self, data: &TaskData) -> Result<Vec<DistHandle>> {
        let task = self.oracle().task_of(data.index)?;
        let mut chain = vec![DistHandle::real(task, data.geometry.clone())];
        for k in 1..=self.t() - task {
            chain.push(self.snapshot_distribution(task, k, &data.train)?);
        }
        Ok(chain)
    }

    /// Held-out accuracy and conditional bound on a task the model has seen.
    pub fn evaluate_task(&self, data: &TaskData, seed: u64) -> Result<GrmMetrics> {
        let task = self.oracle().task_of(data.index)?;
        let x = vae::features(&data.test)?;
        let y = vae::labels(&data.test)?;
        let mut rng = seed::rng_at(seed, &[TAG_EVAL]);
        let pred = vae::argmax_rows(&self.net.predict_proba(x.view(), self.config.n_mc_eval, &mut rng)?);
        let hits: Vec<f64> = pred.iter().zip(&y).map(|(p, t)| if p == t { 1.0 } else { 0.0 }).collect();
        let cond = condition(&y, &vec![task; y.len()], self.n_classes, self.max_tasks)?;
        let ll = self.net.log_likelihood(x.view(), Some(cond.view()), self.config.n_mc_eval, &mut rng)?;
        Ok(GrmMetrics {
            task,
            accuracy: stats::mean(&hits),
            accuracy_se: stats::std_err(&hits),
            elbo: stats::mean(&ll),
            elbo_se: stats::std_err(&ll),
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>, seed: u64) -> Result<Vec<usize>> {
        Ok(vae::argmax_rows(&self.net.predict_proba(x, self.config.n_mc_eval, &mut seed::rng(seed))?))
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new(Role::Baseline);
        let c = &self.config;
        let header = vec![
            self.arch.d_x as f64,
            self.n_classes as f64,
            self.max_tasks as f64,
            c.hidden as f64,
            c.d_z as f64,
            c.lr,
            c.epochs as f64,
            c.batch_size as f64,
            c.n_mc_train as f64,
            c.n_mc_eval as f64,
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
            self.t() as f64,
        ];
        ps.tensors.push(Tensor {
            name: "grm.header".into(),
            shape: vec![header.len()],
            data: header,
        });
        self.net.write_tensors("grm.net", &mut ps);
        for (i, (classes, snap)) in self.task_classes.iter().zip(&self.snapshots).enumerate() {
            ps.tensors.push(Tensor {
                name: format!("grm.task{i}.classes"),
                shape: vec![classes.len()],
                data: classes.iter().map(|&c| c as f64).collect(),
            });
            snap.write_tensors(&format!("grm.snapshot{i}"), &mut ps);
        }
        ps
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        if ps.role != Role::Baseline {
            return Err(Error::Format("parameter set is not a baseline model".into()));
        }
        let h = &ps.get("grm.header")?.data;
        if h.len() != 13 {
            return Err(Error::Format(format!("baseline header has {} entries, expected 13", h.len())));
        }
        let u = |v: f64| v as usize;
        let config = ModelConfig {
            hidden: u(h[3]),
            d_z: u(h[4]),
            lr: h[5],
            epochs: u(h[6]),
            batch_size: u(h[7]),
            n_mc_train: u(h[8]),
            n_mc_eval: u(h[9]),
        };
        let seed = ((h[10] as u64) << 32) | h[11] as u64;
        let mut m = Self::new(config, u(h[0]), u(h[1]), u(h[2]), seed)?;
        m.net = Cvae::read_tensors("grm.net", ps)?;
        if m.net.arch() != m.arch {
            return Err(Error::Format("baseline network shape does not match its header".into()));
        }
        for i in 0..u(h[12]) {
            let classes = ps.get(&format!("grm.task{i}.classes"))?.data.iter().map(|&c| c as usize).collect();
            m.task_classes.push(classes);
            m.snapshots.push(Cvae::read_tensors(&format!("grm.snapshot{i}"), ps)?);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(&checkpoint::load(path)?)
    }
}
