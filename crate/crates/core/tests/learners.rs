use limix_core::gate::GateConfig;
use limix_core::grm::GrmModel;
use limix_core::limix::{Mixture, ModelConfig, StudentModel};
use limix_core::pipeline::{self, FORCE_EXPANSION_V};
use limix_core::task_streams::{make_stream_with, StreamKind, StreamOptions};
use limix_core::{stats, Error, TaskStream};

fn quick() -> ModelConfig {
    ModelConfig {
        lr: 3e-3,
        epochs: 20,
        n_mc_eval: 8,
        ..ModelConfig::default()
    }
}

fn stream(kind: StreamKind, n_tasks: usize, supervised: bool, seed: u64) -> TaskStream {
    let opts = StreamOptions {
        n_train: 600,
        n_test: 300,
        supervised,
        ..StreamOptions::default()
    };
    make_stream_with(kind, n_tasks, seed, &opts).unwrap()
}

#[test]
fn earlier_components_never_change() {
    let s = stream(StreamKind::MsfirAnalog, 4, true, 1);
    let gate = GateConfig {
        v: FORCE_EXPANSION_V,
        ..GateConfig::default()
    };
    let mut mix = Mixture::new(quick(), gate, s.d_x(), Some(s.n_classes()), 2).unwrap();
    let mut seen: Vec<u64> = Vec::new();
    let mut shared = None;
    for t in 0..s.len() {
        mix.learn_task(t, &s.task_data(t).unwrap().train).unwrap();
        let now = mix.checksums();
        assert_eq!(&now[..seen.len()], &seen[..], "task {t} touched a frozen component");
        seen = now;
        let sh = (mix.shared.enc_head.checksum(), mix.shared.dec_trunk.checksum());
        assert_eq!(*shared.get_or_insert(sh), sh);
    }
    assert_eq!(mix.k(), 4);
}

#[test]
fn test_samples_route_to_their_own_component() {
    // First three domains of a four-task stream; the fourth is a near-copy.
    let mut s = stream(StreamKind::MsfirAnalog, 4, false, 3);
    s.tasks.truncate(3);
    let gate = GateConfig {
        v: FORCE_EXPANSION_V,
        ..GateConfig::default()
    };
    let run = pipeline::run_mixture(&s, quick(), gate, 4).unwrap();
    for row in run.evaluations.last().unwrap() {
        assert_eq!(row.component, row.task);
        assert!(row.routed_share > 0.9, "task {} routed share {}", row.task, row.routed_share);
    }
}

#[test]
fn supervised_mixture_learns_each_task() {
    let s = stream(StreamKind::SplitAnalog, 3, true, 5);
    let gate = GateConfig {
        v: FORCE_EXPANSION_V,
        ..GateConfig::default()
    };
    let run = pipeline::run_mixture(&s, quick(), gate, 6).unwrap();
    for row in run.evaluations.last().unwrap() {
        assert!(row.accuracy.unwrap() > 0.8, "task {}: accuracy {:?}", row.task, row.accuracy);
        assert!(row.mse.is_finite() && row.mse >= 0.0);
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let s = stream(StreamKind::MsfirAnalog, 2, true, 7);
    let run = pipeline::run_mixture(&s, quick(), GateConfig::default(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmx");
    run.mixture.save(&path).unwrap();
    let back = Mixture::load(&path).unwrap();
    assert_eq!(back, run.mixture);
    let a = run.mixture.evaluate_stream(&s, 1).unwrap();
    let b = back.evaluate_stream(&s, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn baseline_matches_one_component_in_size_and_grows_chains() {
    let s = stream(StreamKind::MsfirAnalog, 3, true, 9);
    let mut mix = Mixture::new(quick(), GateConfig::default(), s.d_x(), Some(s.n_classes()), 1).unwrap();
    mix.learn_task(0, &s.task_data(0).unwrap().train).unwrap();
    let one = mix.net(0).unwrap().n_params() as f64;
    let grm = GrmModel::new(quick(), s.d_x(), s.n_classes(), s.len(), 1).unwrap();
    assert!((grm.n_params() as f64 - one).abs() <= 0.01 * one, "{} vs {one}", grm.n_params());
    let run = pipeline::run_grm(&s, quick(), 10).unwrap();
    for i in 0..s.len() {
        let chain = run.model.chain(&s.task_data(i).unwrap()).unwrap();
        assert_eq!(chain.len(), s.len() - i + 1, "task {i}");
    }
    let acc = run.evaluations.last().unwrap().iter().map(|m| m.accuracy).collect::<Vec<_>>();
    assert!(stats::mean(&acc) > 0.6, "baseline accuracy {acc:?}");
}

#[test]
fn baseline_rejects_unlabelled_streams() {
    let s = stream(StreamKind::MsfirAnalog, 2, false, 11);
    assert!(matches!(pipeline::run_grm(&s, quick(), 0), Err(Error::Mode)));
}

#[test]
fn distilled_student_is_weaker_but_learnt() {
    let s = stream(StreamKind::MsfirAnalog, 3, false, 12);
    let run = pipeline::run_mixture(&s, quick(), GateConfig::default(), 13).unwrap();
    let (student, rows) = pipeline::distill_and_compare(&run.mixture, &s, 10, 600, 14).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.student_elbo > r.untrained_elbo, "task {}: {r:?}", r.task);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.lmx");
    student.save(&path).unwrap();
    let back = StudentModel::load(&path).unwrap();
    let data = s.task_data(0).unwrap();
    assert_eq!(
        back.log_likelihood(&data.test, 4, 1).unwrap(),
        student.log_likelihood(&data.test, 4, 1).unwrap()
    );
}

#[test]
fn student_needs_an_unsupervised_mixture() {
    let s = stream(StreamKind::MsfirAnalog, 2, true, 15);
    let run = pipeline::run_mixture(&s, quick(), GateConfig::default(), 16).unwrap();
    assert!(pipeline::distill_and_compare(&run.mixture, &s, 1, 10, 0).is_err());
}

#[test]
fn owned_evaluation_matches_routing_with_one_component() {
    let s = stream(StreamKind::MsfirAnalog, 2, true, 17);
    let mut mix = Mixture::new(quick(), GateConfig::default(), s.d_x(), Some(s.n_classes()), 18).unwrap();
    let data = s.task_data(0).unwrap();
    mix.learn_task(0, &data.train).unwrap();
    assert_eq!(mix.evaluate_owned(&data, 3).unwrap(), mix.evaluate_task(&data, 3).unwrap());
    assert!(mix.evaluate_owned(&s.task_data(1).unwrap(), 3).is_err());
}
