//! The five subcommands. Each one writes CSV tables under the output
//! directory and finishes with a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use limix_core::cvae::Cvae;
use limix_core::gate::Choice;
use limix_core::grm::GrmModel;
use limix_core::limix::{GateRecord, Mixture, StudentModel, TaskMetrics};
use limix_core::nn::{ParamSet, Role};
use limix_core::pipeline::{self, MixtureRun, TrendSeries};
use limix_core::risk::{self, BoundLedger, BoundReport, ChainSettings, Totals};
use limix_core::{checkpoint, stats, TaskStream};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MIXTURE_FILE: &str = "mixture.lmx";
pub const GRM_FILE: &str = "grm.lmx";
pub const STUDENT_FILE: &str = "student.lmx";

/// Output directory of a run plus the files it has written so far.
struct Output<'a> {
    dir: &'a Path,
    manifest: &'a mut RunManifest,
}

impl Output<'_> {
    fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(rel)?, text)?;
        self.manifest.record(rel);
        Ok(())
    }

    fn mixture(&mut self, rel: &str, mixture: &Mixture) -> Result<(), CliError> {
        mixture.save(&self.path(rel)?)?;
        self.manifest.record(rel);
        Ok(())
    }
}

fn with_manifest(
    cfg: &ExperimentConfig,
    command: &str,
    body: impl FnOnce(&mut Output) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::start(command, &cfg.to_ini(), cfg.seed);
    let result = body(&mut Output {
        dir: &cfg.out_dir,
        manifest: &mut manifest,
    });
    manifest.finish(&cfg.out_dir, result.is_ok())?;
    result
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "after_task,task,component,routed_share,mse,mse_se,elbo,elbo_se,accuracy,accuracy_se";

fn metrics_rows(out: &mut String, after: usize, rows: &[TaskMetrics]) {
    for m in rows {
        writeln!(
            out,
            "{after},{},{},{},{},{},{},{},{},{}",
            m.task,
            m.component,
            m.routed_share,
            m.mse,
            m.mse_se,
            m.elbo,
            m.elbo_se,
            opt(m.accuracy),
            opt(m.accuracy_se)
        )
        .expect("string write");
    }
}

pub const GATE_HEADER: &str = "task,component,expanded,k_after,p_chosen,p_new,mean_affinity,final_objective";

fn gate_rows(records: &[GateRecord]) -> String {
    let mut s = format!("{GATE_HEADER}\n");
    for r in records {
        let d = &r.decision;
        let p_new = *d.probs.last().expect("probability vector");
        let p_chosen = match d.chosen {
            Choice::Existing(j) => d.probs[j],
            Choice::New => p_new,
        };
        let affinity = if r.expanded { None } else { d.mean_affinity().get(r.component).copied() };
        writeln!(
            s,
            "{},{},{},{},{p_chosen},{p_new},{},{}",
            r.task,
            r.component,
            r.expanded,
            r.k_after,
            opt(affinity),
            opt(r.objective.last().copied())
        )
        .expect("string write");
    }
    s
}

fn session_file(j: usize, s: usize) -> String {
    format!("component{j}_session{s}.lmx")
}

fn save_run(out: &mut Output, run: &MixtureRun) -> Result<(), CliError> {
    out.mixture(&format!("{CHECKPOINT_DIR}/{MIXTURE_FILE}"), &run.mixture)?;
    for (j, sessions) in run.sessions.iter().enumerate() {
        for (s, net) in sessions.iter().enumerate() {
            let mut ps = ParamSet::new(Role::Individual);
            net.write_tensors("net", &mut ps);
            let rel = format!("{CHECKPOINT_DIR}/{}", session_file(j, s));
            checkpoint::save(&out.path(&rel)?, &ps)?;
            out.manifest.record(rel);
        }
    }
    Ok(())
}

fn missing(path: &Path) -> CliError {
    CliError::MissingArtifact(path.display().to_string())
}

/// Loads a mixture with its per-session networks from a checkpoint
/// directory.
pub fn load_run(dir: &Path) -> Result<MixtureRun, CliError> {
    let path = dir.join(MIXTURE_FILE);
    if !path.is_file() {
        return Err(missing(&path));
    }
    let mixture = Mixture::load(&path)?;
    let mut sessions = Vec::new();
    for (j, c) in mixture.components.iter().enumerate() {
        let nets = (0..c.history.len())
            .map(|s| {
                let p = dir.join(session_file(j, s));
                if !p.is_file() {
                    return Err(missing(&p));
                }
                Ok(Cvae::read_tensors("net", &checkpoint::load(&p)?)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        sessions.push(nets);
    }
    Ok(MixtureRun {
        mixture,
        records: Vec::new(),
        evaluations: Vec::new(),
        sessions,
    })
}

fn stream(cfg: &ExperimentConfig) -> Result<TaskStream, CliError> {
    Ok(cfg.stream.build()?)
}

/// Trains the mixture over the stream, evaluating every learnt task after
/// each new one.
pub fn train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    with_manifest(cfg, "train", |out| {
        let stream = stream(cfg)?;
        let mut metrics = format!("{METRICS_HEADER}\n");
        let mut after = 0;
        let mut snapshot_err = None;
        let run = pipeline::run_mixture_with(
            &stream,
            cfg.model,
            cfg.gate,
            cfg.seed,
            &mut |_, _, _, _| Ok(()),
            &mut |mixture, rows| {
                metrics_rows(&mut metrics, after, rows);
                if let Err(e) = out.mixture(&format!("{CHECKPOINT_DIR}/mixture_task{after}.lmx"), mixture) {
                    snapshot_err.get_or_insert(e);
                }
                log::info!("task {after} learnt, K = {}", mixture.k());
                after += 1;
                Ok(())
            },
        );
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                out.write("metrics.csv", &metrics)?;
                return Err(e.into());
            }
        };
        if let Some(e) = snapshot_err {
            return Err(e);
        }
        out.write("metrics.csv", &metrics)?;
        out.write("gate.csv", &gate_rows(&run.records))?;
        save_run(out, &run)
    })
}

pub fn chain_settings(cfg: &ExperimentConfig) -> ChainSettings {
    ChainSettings {
        class: cfg.analysis.class,
        budget: cfg.analysis.budget,
        n_eval: cfg.analysis.n_eval,
        seed: cfg.seed,
    }
}

pub const SERIES_HEADER: &str = "epoch,task,grm,limix,control";

fn series_rows(s: &TrendSeries) -> String {
    let mut out = format!("{SERIES_HEADER}\n");
    for (i, ((g, l), c)) in s.grm.iter().zip(&s.limix).zip(&s.control).enumerate() {
        writeln!(out, "{i},{},{g},{l},{c}", i / s.epochs_per_task).expect("string write");
    }
    out
}

/// Trains the baseline, the mixture and a fresh-component control on the
/// same stream and reports their task-1 risk series and lifelong totals.
pub fn compare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    with_manifest(cfg, "compare", |out| {
        let stream = stream(cfg)?;
        let cmp = pipeline::compare(&stream, cfg.model, cfg.gate, cfg.seed)?;
        out.write("compare_series.csv", &series_rows(&cmp.series))?;

        let mut grm_rows = String::from("after_task,task,accuracy,accuracy_se,elbo,elbo_se\n");
        for (after, rows) in cmp.grm.evaluations.iter().enumerate() {
            for m in rows {
                writeln!(grm_rows, "{after},{},{},{},{},{}", m.task, m.accuracy, m.accuracy_se, m.elbo, m.elbo_se).expect("string write");
            }
        }
        out.write("grm_metrics.csv", &grm_rows)?;

        let settings = chain_settings(cfg);
        let grm_reports = pipeline::analyze_grm(&cmp.grm.model, &stream, &settings)?;
        let mix_reports = pipeline::analyze_mixture(&cmp.mixture, &stream, &settings)?;
        let totals = pipeline::totals(&grm_reports, &mix_reports, &cmp.mixture.ledger()?)?;

        let checks = cmp.series.checks(cfg.stream.options.n_test);
        let mut summary = String::from("metric,value\n");
        let mut put = |k: &str, v: String| writeln!(summary, "{k},{v}").expect("string write");
        put("grm_spearman", checks.grm_spearman.to_string());
        put("limix_changepoint", checks.limix_changepoint.map(|c| c.to_string()).unwrap_or_default());
        put("reuse_task", cmp.series.reuse_task.map(|c| c.to_string()).unwrap_or_default());
        put("control_slope", checks.control_slope.to_string());
        put("control_band", checks.control_band.to_string());
        put("k_limix", cmp.series.k_limix.to_string());
        put("k_control", cmp.series.k_control.to_string());
        put("grm_total", totals.single.to_string());
        put("limix_total", totals.mixture.to_string());
        out.write("compare_summary.csv", &summary)?;

        let grm_rel = format!("{CHECKPOINT_DIR}/{GRM_FILE}");
        cmp.grm.model.save(&out.path(&grm_rel)?)?;
        out.manifest.record(grm_rel);
        save_run(out, &cmp.mixture)
    })
}

pub const BOUNDS_HEADER: &str = "experiment,task,links,head,lhs,rhs,holds";

fn bound_rows(out: &mut String, experiment: &str, reports: &[BoundReport]) {
    for r in reports {
        writeln!(out, "{experiment},{},{},{},{},{},{}", r.task, r.links.len(), r.head, r.lhs, r.rhs, r.holds).expect("string write");
    }
}

fn ledger_rows(ledger: &BoundLedger) -> String {
    let mut s = String::from("task,reuse_count,set\n");
    for (t, c) in ledger.tasks.iter().zip(&ledger.reuse_count) {
        writeln!(s, "{t},{c},{}", if *c > 1 { "B_prime" } else { "B" }).expect("string write");
    }
    s
}

fn run_totals(cfg: &ExperimentConfig, stream: &TaskStream) -> limix_core::Result<Totals> {
    let settings = chain_settings(cfg);
    let grm = pipeline::run_grm(stream, cfg.model, cfg.seed)?;
    let mix = pipeline::run_mixture(stream, cfg.model, cfg.gate, cfg.seed)?;
    let g = pipeline::analyze_grm(&grm.model, stream, &settings)?;
    let m = pipeline::analyze_mixture(&mix, stream, &settings)?;
    pipeline::totals(&g, &m, &mix.ledger()?)
}

/// Bound chains, ledger and totals from saved checkpoints. The baseline is
/// analysed only when its checkpoint is present.
pub fn analyze(cfg: &ExperimentConfig, checkpoints: &Path) -> Result<(), CliError> {
    if !checkpoints.is_dir() {
        return Err(missing(checkpoints));
    }
    with_manifest(cfg, "analyze", |out| {
        let stream = stream(cfg)?;
        let settings = chain_settings(cfg);
        let run = load_run(checkpoints)?;
        let mix_reports = pipeline::analyze_mixture(&run, &stream, &settings)?;
        let grm_path = checkpoints.join(GRM_FILE);
        let grm_reports = if grm_path.is_file() {
            Some(pipeline::analyze_grm(&GrmModel::load(&grm_path)?, &stream, &settings)?)
        } else {
            None
        };

        let mut rows: Vec<_> = mix_reports.iter().flat_map(|r| risk::report_rows("limix", r, cfg.seed)).collect();
        for r in grm_reports.iter().flatten() {
            rows.extend(risk::report_rows("grm", r, cfg.seed));
        }
        let mut buf = Vec::new();
        risk::write_risk_csv(&mut buf, &rows)?;
        out.write("analysis.csv", &String::from_utf8(buf).expect("utf-8 csv"))?;

        let mut bounds = format!("{BOUNDS_HEADER}\n");
        bound_rows(&mut bounds, "limix", &mix_reports);
        if let Some(g) = &grm_reports {
            bound_rows(&mut bounds, "grm", g);
        }
        out.write("bounds.csv", &bounds)?;

        let ledger = run.ledger()?;
        out.write("ledger.csv", &ledger_rows(&ledger))?;
        let mut summary = String::from("metric,value\n");
        let mut put = |k: &str, v: String| writeln!(summary, "{k},{v}").expect("string write");
        put("k", ledger.k.to_string());
        put("t", ledger.t().to_string());
        put("card_b", ledger.card_b().to_string());
        put("card_b_prime", ledger.card_b_prime().to_string());
        put(
            "v",
            match risk::trade_off_ratio(&ledger) {
                Ok(v) => v.to_string(),
                Err(limix_core::Error::UndefinedRatio(_)) => "undefined".into(),
                Err(e) => return Err(e.into()),
            },
        );
        put("limix_total", mix_reports.iter().map(|r| r.rhs).sum::<f64>().to_string());
        if let Some(g) = &grm_reports {
            let totals = pipeline::totals(g, &mix_reports, &ledger)?;
            put("grm_total", totals.single.to_string());
        }
        out.write("summary.csv", &summary)?;

        if !cfg.analysis.orders.is_empty() {
            let table = risk::order_sensitivity(&stream, &cfg.analysis.orders, &mut |s| run_totals(cfg, s))?;
            let mut s = String::from("order,grm_total,limix_total\n");
            for r in table {
                let order: Vec<String> = r.order.iter().map(usize::to_string).collect();
                writeln!(s, "{},{},{}", order.join(" "), r.totals.single, r.totals.mixture).expect("string write");
            }
            out.write("orders.csv", &s)?;
        }
        Ok(())
    })
}

pub const DISTILL_HEADER: &str = "task,mixture_elbo,student_elbo,deficit,untrained_elbo";

/// Distils a student from a saved unsupervised mixture and compares the two
/// on every learnt task.
pub fn distill(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(), CliError> {
    if !checkpoint.is_file() {
        return Err(missing(checkpoint));
    }
    with_manifest(cfg, "distill", |out| {
        let stream = stream(cfg)?;
        let mixture = Mixture::load(checkpoint)?;
        let (student, rows) = pipeline::distill_and_compare(&mixture, &stream, cfg.student_epochs, cfg.student_replay, cfg.seed)?;
        let mut s = format!("{DISTILL_HEADER}\n");
        for r in &rows {
            writeln!(s, "{},{},{},{},{}", r.task, r.mixture_elbo, r.student_elbo, r.deficit(), r.untrained_elbo).expect("string write");
        }
        out.write("distill.csv", &s)?;
        student.save(&out.path(STUDENT_FILE)?)?;
        out.manifest.record(STUDENT_FILE);
        Ok(())
    })
}

/// Loads a student checkpoint written by [`distill`].
pub fn load_student(path: &Path) -> Result<StudentModel, CliError> {
    if !path.is_file() {
        return Err(missing(path));
    }
    Ok(StudentModel::load(path)?)
}

pub const SWEEP_HEADER: &str = "param,value,k,avg_mse,avg_elbo,avg_accuracy";

/// Retrains the mixture once per value of `param` and tabulates K and the
/// final averages over every task.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[String]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::config("--values needs at least one value"));
    }
    let mut points = values
        .iter()
        .map(|v| {
            let x: f64 = v
                .parse()
                .map_err(|_| CliError::config(format!("sweep value `{v}` is not a number")))?;
            Ok((x, v.clone(), cfg.with_param(param, v)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    with_manifest(cfg, "sweep", |out| {
        let mut s = format!("{SWEEP_HEADER}\n");
        for (_, v, c) in &points {
            let run = pipeline::run_mixture(&stream(c)?, c.model, c.gate, c.seed)?;
            let last = run.evaluations.last().map(Vec::as_slice).unwrap_or_default();
            let mean_of = |f: &dyn Fn(&TaskMetrics) -> f64| stats::mean(&last.iter().map(f).collect::<Vec<_>>());
            let acc = limix_core::limix::average_accuracy(last);
            writeln!(
                s,
                "{param},{v},{},{},{},{}",
                run.mixture.k(),
                mean_of(&|m| m.mse),
                mean_of(&|m| m.elbo),
                opt(acc)
            )
            .expect("string write");
            log::info!("{param} = {v}: K = {}", run.mixture.k());
        }
        out.write("sweep.csv", &s)
    })
}
