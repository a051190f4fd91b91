use limix_core::gate::{self, assignment_probs, effective_count, AffinityRow, Choice, GateComponent, GateConfig};
use limix_core::{Result, Sample};
use proptest::prelude::*;

fn cfg(a: f64, v: f64, n: usize) -> GateConfig {
    GateConfig { a, v, n_g: 8, n_total: n }
}

#[test]
fn effective_count_oracle() {
    let row = AffinityRow::new(vec![0.5, 1.0], 1.0).unwrap();
    let e = std::f64::consts::E;
    let want = 10.0 * e * e / (e * e + 2.0 * e);
    let got = effective_count(&cfg(1.0, 1.0, 11), &row, 0).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 5.7612).abs() < 5e-5);
}

#[test]
fn equal_exponents_split_as_fractions() {
    let row = AffinityRow::new(vec![1.0], 1.0).unwrap();
    let p = assignment_probs(&cfg(1.0, 1.0, 101), &row).unwrap();
    assert!((p[0] - 50.0 / 101.0).abs() < 1e-15);
    assert!((p[1] - 51.0 / 101.0).abs() < 1e-15);
}

struct Fixed {
    own: f64,
    replay: f64,
}

impl GateComponent for Fixed {
    fn log_likelihood(&self, samples: &[Sample], _seed: u64) -> Result<Vec<f64>> {
        Ok(samples.iter().map(|s| if s.features[0] > 0.5 { self.replay } else { self.own }).collect())
    }

    fn replay(&self, n: usize, _seed: u64) -> Result<Vec<Sample>> {
        Ok(vec![Sample::unlabeled(vec![1.0]); n])
    }
}

#[test]
fn indicator_picks_the_closest_component() {
    let group = vec![Sample::unlabeled(vec![0.0]); 16];
    let far = Fixed { own: -30.0, replay: -5.0 };
    let near = Fixed { own: -5.1, replay: -5.0 };
    let comps: [&dyn GateComponent; 2] = [&far, &near];
    let d = gate::task_indicator(&cfg(1.0, 0.5, 1000), &group, &comps, 0).unwrap();
    assert_eq!(d.chosen, Choice::Existing(1));
    assert!((d.mean_affinity()[1] - 0.1).abs() < 1e-9);

    let d = gate::task_indicator(&cfg(1.0, 0.5, 1000), &group, &comps[..1], 0).unwrap();
    assert_eq!(d.chosen, Choice::New);
}

proptest! {
    #[test]
    fn rows_sum_to_one(
        ks in prop::collection::vec(1e-6f64..50.0, 1..=8),
        a in 1e-3f64..100.0,
        v in 1e-3f64..100.0,
        n in 2usize..100_000,
    ) {
        let p = assignment_probs(&cfg(a, v, n), &AffinityRow::new(ks, v).unwrap()).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn raising_a_never_lowers_expansion(
        ks in prop::collection::vec(1e-3f64..20.0, 1..=8),
        a in 1e-3f64..10.0,
        da in 0.0f64..10.0,
        v in 1e-2f64..10.0,
        n in 2usize..10_000,
    ) {
        let row = AffinityRow::new(ks, v).unwrap();
        let lo = assignment_probs(&cfg(a, v, n), &row).unwrap();
        let hi = assignment_probs(&cfg(a + da, v, n), &row).unwrap();
        prop_assert!(hi.last().unwrap() + 1e-12 >= *lo.last().unwrap());
    }

    #[test]
    fn raising_v_never_raises_expansion(
        ks in prop::collection::vec(1e-3f64..20.0, 1..=8),
        v in 1e-2f64..10.0,
        dv in 0.0f64..10.0,
        n in 2usize..10_000,
    ) {
        let lo = assignment_probs(&cfg(1.0, v, n), &AffinityRow::new(ks.clone(), v).unwrap()).unwrap();
        let hi = assignment_probs(&cfg(1.0, v + dv, n), &AffinityRow::new(ks, v + dv).unwrap()).unwrap();
        prop_assert!(*hi.last().unwrap() <= lo.last().unwrap() + 1e-12);
    }
}
