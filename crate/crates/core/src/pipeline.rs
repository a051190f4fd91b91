//! End-to-end runs over a task stream: the mixture and the replay baseline
//! trained side by side, per-epoch risk traces and the bound analyses.

use std::sync::Arc;

use rand::Rng as _;

use crate::cvae::Cvae;
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::grm::{GrmMetrics, GrmModel};
use crate::limix::{GateRecord, Mixture, ModelConfig, TaskMetrics};
use crate::risk::{self, BoundLedger, BoundReport, ChainSettings, Classifier, DistHandle, DistKind, Loss, NetClassifier, Sampler, Totals};
use crate::seed;
use crate::stats;
use crate::task_streams::{Sample, TaskData, TaskStream};
use crate::vae;

const TAG_EVAL: u64 = 31;
const TAG_RISK: u64 = 32;
const TAG_CHAIN: u64 = 33;

/// A mixture trained over a whole stream.
#[derive(Debug, Clone)]
pub struct MixtureRun {
    pub mixture: Mixture,
    pub records: Vec<GateRecord>,
    /// `evaluate_stream` after each task.
    pub evaluations: Vec<Vec<TaskMetrics>>,
    /// Per component, its network after each of its training sessions.
    pub sessions: Vec<Vec<Cvae>>,
}

impl MixtureRun {
    pub fn ledger(&self) -> Result<BoundLedger> {
        let histories: Vec<Vec<usize>> = self.mixture.components.iter().map(|c| c.history.clone()).collect();
        BoundLedger::from_histories(&histories)
    }

    /// The task at which an existing component was first reused.
    pub fn first_reuse(&self) -> Option<usize> {
        self.records.iter().find(|r| !r.expanded).map(|r| r.task)
    }
}

pub fn run_mixture(stream: &TaskStream, model: ModelConfig, gate: GateConfig, seed: u64) -> Result<MixtureRun> {
    run_mixture_with(stream, model, gate, seed, &mut |_, _, _, _| Ok(()), &mut |_, _| Ok(()))
}

/// Trains a mixture task by task; `on_epoch(task, epoch, component, net)`
/// sees every epoch and `on_task(mixture, metrics)` the state after each
/// task.
pub fn run_mixture_with(
    stream: &TaskStream,
    model: ModelConfig,
    gate: GateConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, usize, usize, &Cvae) -> Result<()>,
    on_task: &mut dyn FnMut(&Mixture, &[TaskMetrics]) -> Result<()>,
) -> Result<MixtureRun> {
    let n_classes = stream.supervised.then(|| stream.n_classes());
    let mut mixture = Mixture::new(model, gate, stream.d_x(), n_classes, seed)?;
    let mut records = Vec::new();
    let mut evaluations = Vec::new();
    let mut sessions: Vec<Vec<Cvae>> = Vec::new();
    for t in 0..stream.len() {
        let data = stream.task_data(t)?;
        let rec = mixture.learn_task_with(t, &data.train, &mut |e, j, net| on_epoch(t, e, j, net))?;
        if rec.expanded {
            sessions.push(Vec::new());
        }
        sessions[rec.component].push(mixture.net(rec.component)?);
        records.push(rec);
        let metrics = evaluate_prefix(&mixture, stream, t, seed)?;
        on_task(&mixture, &metrics)?;
        evaluations.push(metrics);
    }
    Ok(MixtureRun {
        mixture,
        records,
        evaluations,
        sessions,
    })
}

/// Metrics of tasks `0..=upto`, each with its own evaluation seed.
pub fn evaluate_prefix(mixture: &Mixture, stream: &TaskStream, upto: usize, seed: u64) -> Result<Vec<TaskMetrics>> {
    (0..=upto)
        .map(|i| mixture.evaluate_task(&stream.task_data(i)?, seed::derive(seed, &[TAG_EVAL, i as u64])))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GrmRun {
    pub model: GrmModel,
    pub evaluations: Vec<Vec<GrmMetrics>>,
}

pub fn run_grm(stream: &TaskStream, model: ModelConfig, seed: u64) -> Result<GrmRun> {
    run_grm_with(stream, model, seed, &mut |_, _, _| Ok(()))
}

/// Trains the baseline task by task; `on_epoch(task, epoch, net)`.
pub fn run_grm_with(
    stream: &TaskStream,
    model: ModelConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, usize, &Cvae) -> Result<()>,
) -> Result<GrmRun> {
    if !stream.supervised {
        return Err(Error::Mode);
    }
    let mut grm = GrmModel::new(model, stream.d_x(), stream.n_classes(), stream.len(), seed)?;
    let mut evaluations = Vec::new();
    for t in 0..stream.len() {
        let data = stream.task_data(t)?;
        grm.learn_task_with(&data.train, &mut |e, net| on_epoch(t, e, net))?;
        let rows = (0..=t)
            .map(|i| grm.evaluate_task(&stream.task_data(i)?, seed::derive(seed, &[TAG_EVAL, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        evaluations.push(rows);
    }
    Ok(GrmRun { model: grm, evaluations })
}

/// Zero-one risk of a network's classifier on a fixed labelled set.
pub fn net_risk(net: &Cvae, samples: &[Sample], n_mc: usize, seed: u64) -> Result<f64> {
    let h = NetClassifier {
        net: net.clone(),
        n_mc,
        seed,
    };
    risk::risk_on(&h, samples, Loss::ZeroOne)
}

/// Generations of a supervised component conditioned on labels drawn
/// uniformly from `classes`, labelled by the component's classifier.
#[derive(Debug, Clone)]
pub struct ComponentSampler {
    pub net: Cvae,
    pub classes: Vec<usize>,
    pub n_mc: usize,
}

impl Sampler for ComponentSampler {
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        if n == 0 || self.classes.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = seed::rng(seed);
        let n_classes = self.net.arch().d_cond;
        let ys: Vec<usize> = (0..n).map(|_| self.classes[rng.random_range(0..self.classes.len())]).collect();
        let x = self.net.generate(n, Some(vae::one_hot(&ys, n_classes)?.view()), &mut rng)?;
        let labels = vae::argmax_rows(&self.net.predict_proba(x.view(), self.n_mc, &mut rng)?);
        Ok(x.rows()
            .into_iter()
            .zip(labels)
            .map(|(r, y)| Sample::new(r.to_vec(), Some(y)))
            .collect())
    }
}

fn task_classes(samples: &[Sample]) -> Result<Vec<usize>> {
    let mut c = vae::labels(samples)?;
    c.sort_unstable();
    c.dedup();
    Ok(c)
}

/// Chain of a task under the mixture: the real distribution, its training
/// set, then the owning component's generations after each later training
/// session. Its length follows the ledger's reuse count.
pub fn mixture_chain(run: &MixtureRun, data: &TaskData) -> Result<Vec<DistHandle>> {
    let task = data.index;
    let j = run
        .mixture
        .component_of(task)
        .ok_or_else(|| Error::input(format!("task {task} was not learnt")))?;
    let history = &run.mixture.components[j].history;
    let pos = history.iter().position(|&t| t == task).expect("task in history");
    let n_classes = run.mixture.arch.n_classes.ok_or(Error::Mode)?;
    let classes = task_classes(&data.train)?;
    let mut chain = vec![
        DistHandle::real(task, data.geometry.clone()),
        DistHandle::empirical(DistKind::Chain, task, 1, n_classes, data.train.clone()),
    ];
    for (k, net) in run.sessions[j].iter().enumerate().skip(pos + 1) {
        let sampler = ComponentSampler {
            net: net.clone(),
            classes: classes.clone(),
            n_mc: run.mixture.config.n_mc_eval,
        };
        chain.push(DistHandle::new(DistKind::Chain, task, k - pos + 1, n_classes, Arc::new(sampler)));
    }
    Ok(chain)
}

/// Bound reports for every task of a mixture run; each task is judged with
/// the final classifier of the component that holds it.
pub fn analyze_mixture(run: &MixtureRun, stream: &TaskStream, settings: &ChainSettings) -> Result<Vec<BoundReport>> {
    (0..stream.len())
        .map(|t| {
            let data = stream.task_data(t)?;
            let j = run.mixture.component_of(t).ok_or_else(|| Error::input(format!("task {t} was not learnt")))?;
            let h = NetClassifier {
                net: run.mixture.net(j)?,
                n_mc: run.mixture.config.n_mc_eval,
                seed: seed::derive(settings.seed, &[TAG_RISK, t as u64]),
            };
            let s = ChainSettings {
                seed: seed::derive(settings.seed, &[TAG_CHAIN, t as u64]),
                ..*settings
            };
            risk::bound_chain(t, &mixture_chain(run, &data)?, &h, &s)
        })
        .collect()
}

/// Bound reports for every task learnt by the baseline.
pub fn analyze_grm(grm: &GrmModel, stream: &TaskStream, settings: &ChainSettings) -> Result<Vec<BoundReport>> {
    (0..grm.t())
        .map(|t| {
            let data = stream.task_data(t)?;
            let h = grm.classifier(seed::derive(settings.seed, &[TAG_RISK, t as u64]));
            let s = ChainSettings {
                seed: seed::derive(settings.seed, &[TAG_CHAIN, t as u64]),
                ..*settings
            };
            risk::bound_chain(t, &grm.chain(&data)?, &h, &s)
        })
        .collect()
}

/// Lifelong totals of the baseline against the mixture.
pub fn totals(grm_reports: &[BoundReport], mixture_reports: &[BoundReport], ledger: &BoundLedger) -> Result<Totals> {
    risk::lifelong_totals(grm_reports, mixture_reports, ledger)
}

/// Per-epoch task-1 target risk of the baseline, the mixture and the
/// fresh-component control. Each series has one value per training epoch of the
/// whole stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendSeries {
    pub epochs_per_task: usize,
    pub grm: Vec<f64>,
    pub limix: Vec<f64>,
    pub control: Vec<f64>,
    /// First task at which the mixture reused a component.
    pub reuse_task: Option<usize>,
    /// Component count of the mixture and of the control.
    pub k_limix: usize,
    pub k_control: usize,
}

/// Expansion constant that makes every task open a fresh component.
pub const FORCE_EXPANSION_V: f64 = 1e-3;

/// The three learners of [`trend_series`] with their series.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub series: TrendSeries,
    pub grm: GrmRun,
    pub mixture: MixtureRun,
    pub control: MixtureRun,
}

pub fn trend_series(stream: &TaskStream, model: ModelConfig, gate: GateConfig, seed: u64) -> Result<TrendSeries> {
    Ok(compare(stream, model, gate, seed)?.series)
}

/// Runs the baseline, the mixture and a mixture forced to expand at every
/// task on the same stream, recording after every epoch the zero-one risk
/// on the first task's test set of whichever network holds that task.
pub fn compare(stream: &TaskStream, model: ModelConfig, gate: GateConfig, seed: u64) -> Result<Comparison> {
    let first = stream.task_data(0)?;
    let test = first.test;
    let n_mc = model.n_mc_eval;
    let risk_seed = seed::derive(seed, &[TAG_RISK]);
    let mut grm = Vec::new();
    let grm_run = run_grm_with(stream, model, seed, &mut |_, _, net| {
        grm.push(net_risk(net, &test, n_mc, risk_seed)?);
        Ok(())
    })?;
    let mixture_series = |gate: GateConfig| -> Result<(Vec<f64>, MixtureRun)> {
        let mut series = Vec::new();
        let mut last = f64::NAN;
        let run = run_mixture_with(
            stream,
            model,
            gate,
            seed,
            &mut |_, _, j, net| {
                if j == 0 {
                    last = net_risk(net, &test, n_mc, risk_seed)?;
                }
                series.push(last);
                Ok(())
            },
            &mut |_, _| Ok(()),
        )?;
        Ok((series, run))
    };
    let (limix, run) = mixture_series(gate)?;
    let (control, control_run) = mixture_series(GateConfig {
        v: FORCE_EXPANSION_V,
        ..gate
    })?;
    let series = TrendSeries {
        epochs_per_task: model.epochs,
        grm,
        limix,
        control,
        reuse_task: run.first_reuse(),
        k_limix: run.mixture.k(),
        k_control: control_run.mixture.k(),
    };
    Ok(Comparison {
        series,
        grm: grm_run,
        mixture: run,
        control: control_run,
    })
}

/// Mean of each task's epochs, from the second task on.
pub fn per_task_means(series: &[f64], epochs_per_task: usize) -> Vec<f64> {
    series.chunks(epochs_per_task).skip(1).map(stats::mean).collect()
}

/// Task (0-based) where the per-task mean moves the most, measured against
/// the value at the end of the first task. Ties go to the earliest task.
pub fn changepoint(series: &[f64], epochs_per_task: usize) -> Option<usize> {
    let base = *series.get(epochs_per_task.checked_sub(1)?)?;
    let means = per_task_means(series, epochs_per_task);
    let mut prev = base;
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in means.iter().enumerate() {
        let jump = (m - prev).abs();
        if best.is_none_or(|(_, b)| jump > b) {
            best = Some((i + 1, jump));
        }
        prev = *m;
    }
    best.map(|(t, _)| t)
}

/// Risk and discrepancy of the first task at one epoch of the baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRisk {
    pub task: usize,
    pub epoch: usize,
    /// `R(h, S_1)` on held-out real data.
    pub target: f64,
    /// `R(h, S~_1)` on the current generations of the first task, against
    /// the labels they were generated for.
    pub source: f64,
    /// `Psi(S_1, S~_1)`.
    pub psi: f64,
}

/// Per-epoch trace of the baseline's first-task risks from the second task
/// on.
pub fn grm_risk_trace(stream: &TaskStream, model: ModelConfig, settings: &ChainSettings) -> Result<Vec<EpochRisk>> {
    let first = stream.task_data(0)?;
    let real = DistHandle::real(0, first.geometry.clone());
    let n_classes = stream.n_classes();
    let classes = task_classes(&first.train)?;
    let mut trace = Vec::new();
    let seed = settings.seed;
    run_grm_with(stream, model, seed, &mut |t, e, net| {
        if t == 0 {
            return Ok(());
        }
        let s = seed::derive(seed, &[TAG_RISK, t as u64, e as u64]);
        let mut rng = seed::rng(s);
        let ys: Vec<usize> = (0..settings.n_eval).map(|_| classes[rng.random_range(0..classes.len())]).collect();
        let cond = crate::grm::task_condition(&ys, 0, n_classes, stream.len())?;
        let x = net.generate(ys.len(), Some(cond.view()), &mut rng)?;
        let generated: Vec<Sample> = x.rows().into_iter().zip(&ys).map(|(r, &y)| Sample::new(r.to_vec(), Some(y))).collect();
        let h = NetClassifier {
            net: net.clone(),
            n_mc: model.n_mc_eval,
            seed: s,
        };
        let target = risk::empirical_risk(&h, &real, settings.n_eval, s, settings.class.loss)?;
        let source = risk::risk_on(&h, &generated, settings.class.loss)?;
        let approx = DistHandle::empirical(DistKind::Chain, 0, t + 1, n_classes, generated);
        let psi = risk::discrepancy(&real, &approx, &settings.class, &settings.budget, settings.n_eval, s)?.estimate;
        trace.push(EpochRisk {
            task: t,
            epoch: e,
            target,
            source,
            psi,
        });
        Ok(())
    })?;
    Ok(trace)
}

/// Gap check for a task held by a fresh component: how far the target risk
/// is from source risk plus discrepancy, next to the combined error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapCheck {
    pub target: f64,
    pub source: f64,
    pub psi: f64,
    pub sigma: f64,
    /// Standard error of `target - source`.
    pub mc_sd: f64,
}

impl GapCheck {
    pub fn gap(&self) -> f64 {
        (self.target - (self.source + self.psi)).abs()
    }

    pub fn within(&self, n_sd: f64) -> bool {
        self.gap() <= self.sigma + n_sd * self.mc_sd
    }
}

/// First-task gap check for a mixture run whose first component was never
/// retrained.
pub fn fresh_gap(run: &MixtureRun, stream: &TaskStream, settings: &ChainSettings) -> Result<GapCheck> {
    let data = stream.task_data(0)?;
    let j = run.mixture.component_of(0).ok_or_else(|| Error::input("task 0 was not learnt"))?;
    if run.mixture.components[j].history.len() != 1 {
        return Err(Error::input("the first task's component was retrained"));
    }
    let chain = mixture_chain(run, &data)?;
    let h = NetClassifier {
        net: run.mixture.net(j)?,
        n_mc: run.mixture.config.n_mc_eval,
        seed: seed::derive(settings.seed, &[TAG_RISK]),
    };
    let report = risk::bound_chain(0, &chain, &h, settings)?;
    let loss = settings.class.loss;
    let source_set = chain[1].sample(settings.n_eval, settings.seed)?;
    let target_set = chain[0].sample(settings.n_eval, seed::derive(settings.seed, &[TAG_EVAL]))?;
    let hits = |s: &[Sample]| -> Result<Vec<f64>> {
        let x = vae::features(s)?;
        let y = vae::labels(s)?;
        Ok(h.predict(x.view())?.iter().zip(&y).map(|(&p, &t)| loss.tau(p, t)).collect())
    };
    let (ts, ss) = (hits(&target_set)?, hits(&source_set)?);
    let link = &report.links[0];
    Ok(GapCheck {
        target: stats::mean(&ts),
        source: stats::mean(&ss),
        psi: link.psi,
        sigma: link.sigma.total(),
        mc_sd: (stats::std_err(&ts).powi(2) + stats::std_err(&ss).powi(2)).sqrt(),
    })
}

/// Summary statistics of a [`TrendSeries`], taken from the end of the first
/// task on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendChecks {
    pub grm_spearman: f64,
    pub limix_changepoint: Option<usize>,
    pub control_slope: f64,
    /// Three binomial standard errors of the control's risk level, spread
    /// over the length of the series.
    pub control_band: f64,
}

impl TrendChecks {
    pub fn control_flat(&self) -> bool {
        self.control_slope.abs() <= self.control_band
    }

    pub fn grm_increasing(&self) -> bool {
        self.grm_spearman > 0.0
    }

    pub fn changepoint_at(&self, reuse: Option<usize>) -> bool {
        reuse.is_some() && self.limix_changepoint == reuse
    }
}

impl TrendSeries {
    pub fn checks(&self, n_test: usize) -> TrendChecks {
        let e = self.epochs_per_task;
        let tail = |s: &[f64]| s[e.saturating_sub(1).min(s.len())..].to_vec();
        let grm = tail(&self.grm);
        let idx: Vec<f64> = (0..grm.len()).map(|i| i as f64).collect();
        let control = tail(&self.control);
        let p = stats::mean(&control).clamp(0.0, 1.0);
        let se = (p * (1.0 - p) / n_test.max(1) as f64).sqrt().max(1.0 / n_test.max(1) as f64);
        TrendChecks {
            grm_spearman: stats::spearman(&idx, &grm),
            limix_changepoint: changepoint(&self.limix, e),
            control_slope: stats::slope(&control),
            control_band: 3.0 * se / control.len().max(2) as f64,
        }
    }
}

/// One task's row of the student comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentRow {
    pub task: usize,
    pub mixture_elbo: f64,
    pub student_elbo: f64,
    /// The student before distillation.
    pub untrained_elbo: f64,
}

impl StudentRow {
    pub fn deficit(&self) -> f64 {
        self.mixture_elbo - self.student_elbo
    }
}

/// Distils a student from an unsupervised mixture, using the last task's
/// training set plus replay from every component, and scores it next to
/// the routed mixture on every learnt task.
pub fn distill_and_compare(
    mixture: &Mixture,
    stream: &TaskStream,
    epochs: usize,
    n_replay: usize,
    seed: u64,
) -> Result<(crate::limix::StudentModel, Vec<StudentRow>)> {
    use crate::limix::{distill_student, StudentModel};
    let tasks = mixture.tasks_learnt();
    let last = *tasks.last().ok_or_else(|| Error::input("mixture has learnt no task"))?;
    let untrained = StudentModel::new(mixture, seed)?;
    let mut student = untrained.clone();
    distill_student(&mut student, mixture, &stream.task_data(last)?.train, n_replay, epochs, seed)?;
    let n_mc = mixture.config.n_mc_eval;
    let rows = tasks
        .into_iter()
        .map(|t| {
            let data = stream.task_data(t)?;
            let s = seed::derive(seed, &[TAG_EVAL, t as u64]);
            Ok(StudentRow {
                task: t,
                mixture_elbo: mixture.evaluate_task(&data, s)?.elbo,
                student_elbo: stats::mean(&student.log_likelihood(&data.test, n_mc, s)?),
                untrained_elbo: stats::mean(&untrained.log_likelihood(&data.test, n_mc, s)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((student, rows))
}
