#[path = "support/oracles.rs"]
mod oracles;

use limix_core::risk::{self, ConstantClassifier, DistHandle, DistKind, Hypothesis, Loss, TrueLabels};
use limix_core::task_streams::TaskSpec;
use limix_core::{seed, Sample};
use rand::Rng as _;

fn real_task() -> DistHandle {
    DistHandle::real(0, TaskSpec::blobs(4, 0).geometry().unwrap())
}

#[test]
fn constant_classifier_risk_is_the_label_share() {
    let d = real_task();
    let n = 4000;
    let labels: Vec<usize> = d.sample(n, 3).unwrap().iter().map(|s| s.label.unwrap()).collect();
    let ones = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
    let r = risk::empirical_risk(&ConstantClassifier(0), &d, n, 3, Loss::ZeroOne).unwrap();
    assert_eq!(r, ones);
    assert!((r - 0.5).abs() <= 3.0 / (2.0 * (n as f64).sqrt()));
    assert_eq!(risk::empirical_risk(&TrueLabels(TaskSpec::blobs(4, 0).geometry().unwrap()), &d, n, 3, Loss::ZeroOne).unwrap(), 0.0);
}

#[test]
fn disagreement_matches_grid_enumeration() {
    let mut grid = Vec::new();
    for i in -10..=10 {
        for j in -10..=10 {
            grid.push(Sample::new(vec![i as f64 * 0.2, j as f64 * 0.2], Some(0)));
        }
    }
    let h1 = Hypothesis::halfplane(0.3, 0.1);
    let h2 = Hypothesis::halfplane(1.9, -0.4);
    let brute = grid
        .iter()
        .filter(|s| {
            let (x, y) = (s.features[0], s.features[1]);
            (0.3f64.cos() * x + 0.3f64.sin() * y > 0.1) != (1.9f64.cos() * x + 1.9f64.sin() * y > -0.4)
        })
        .count() as f64
        / grid.len() as f64;
    let n = grid.len();
    let d = DistHandle::empirical(DistKind::Chain, 0, 1, 2, grid);
    let r12 = risk::disagreement_risk(&h1, &h2, &d, n, 0, Loss::ZeroOne).unwrap();
    let r21 = risk::disagreement_risk(&h2, &h1, &d, n, 0, Loss::ZeroOne).unwrap();
    assert_eq!(r12, brute);
    assert_eq!(r12, r21);
    assert_eq!(risk::disagreement_risk(&h1, &h1, &d, n, 0, Loss::ZeroOne).unwrap(), 0.0);
}

#[test]
fn combined_error_tiny_instance() {
    let pts: Vec<Sample> = [-1.5, -0.5, 0.5, 1.5].iter().map(|&x| Sample::new(vec![x], Some(0))).collect();
    let d = DistHandle::empirical(DistKind::Chain, 0, 1, 2, pts);
    let star = Hypothesis::threshold(0.0, false);
    let a = Hypothesis::threshold(1.0, false);
    let b = Hypothesis::threshold(-1.0, false);
    let s = risk::combined_error(&a, &b, &star, &d, &d, 4, 0, Loss::ZeroOne).unwrap();
    assert_eq!((s.source_term, s.target_term), (0.25, 0.5));
    let zero = risk::combined_error(&star, &star, &star, &d, &d, 4, 0, Loss::ZeroOne).unwrap();
    assert_eq!(zero.total(), 0.0);
}

#[test]
fn self_discrepancy_is_exactly_zero() {
    let d = real_task();
    let class = risk::HypothesisClass::linear(8, 2);
    let budget = risk::Budget {
        restarts: 2,
        steps: 50,
        lr: 0.05,
    };
    assert_eq!(risk::discrepancy(&d, &d, &class, &budget, 500, 9).unwrap().estimate, 0.0);
}

#[test]
fn certificates_replay_their_estimates() {
    for i in 0..6 {
        let inst = oracles::psi_instance(i);
        let adv = inst.adversarial(i);
        let (h, h2) = &adv.certificate;
        let replay = risk::disagreement_gap(h, h2, inst.xa.view(), inst.xb.view(), Loss::ZeroOne).unwrap();
        assert!((replay - adv.estimate).abs() < 1e-9);
        let ex = risk::discrepancy_enumerated(inst.xa.view(), inst.xb.view(), &inst.grid, Loss::ZeroOne).unwrap();
        let (g, g2) = &ex.certificate;
        let replay = risk::disagreement_gap(g, g2, inst.xa.view(), inst.xb.view(), Loss::ZeroOne).unwrap();
        assert!((replay - ex.estimate).abs() < 1e-9);
    }
}

#[test]
fn adversarial_estimate_reaches_the_enumerated_sup() {
    for i in 0..10 {
        let inst = oracles::psi_instance(i);
        let ex = inst.exhaustive();
        let adv = inst.adversarial(i).estimate;
        assert!(adv >= 0.9 * ex, "instance {i}: adversarial {adv} vs exhaustive {ex}");
    }
}

#[test]
fn three_term_bound_holds_exactly() {
    for i in 0..50 {
        let t = oracles::bound_instance(i);
        assert!(t.lhs <= t.rhs() + 1e-12, "instance {i}: {t:?}");
    }
}

#[test]
fn enumerated_sup_beats_random_pairs() {
    let mut rng = seed::rng(1);
    for i in 0..6 {
        let inst = oracles::psi_instance(i);
        let ex = inst.exhaustive();
        for _ in 0..50 {
            let a = &inst.grid[rng.random_range(0..inst.grid.len())];
            let b = &inst.grid[rng.random_range(0..inst.grid.len())];
            let g = risk::disagreement_gap(a, b, inst.xa.view(), inst.xb.view(), Loss::ZeroOne).unwrap();
            assert!(g <= ex + 1e-12);
        }
    }
}

#[test]
fn bounded_absolute_loss_is_clipped() {
    let l = Loss::BoundedAbsolute;
    assert_eq!((l.tau(0, 3), l.tau(1, 2), l.tau(2, 2)), (1.0, 1.0, 0.0));
    assert_eq!(l.tau(4, 1), l.tau(1, 4));
}
