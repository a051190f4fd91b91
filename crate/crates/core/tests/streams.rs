use limix_core::seed;
use limix_core::task_streams::{generate_task, make_stream, make_stream_with, Family, StreamKind, StreamOptions, TaskSpec};

fn families() -> Vec<Family> {
    vec![
        Family::GaussianBlobs,
        Family::TwoMoons,
        Family::PermutedFeatures(vec![7, 6, 5, 4, 3, 2, 1, 0]),
        Family::RotatedFeatures { angle_deg: 35.0 },
        Family::InvertedFeatures,
    ]
}

#[test]
fn marginal_moments_match_closed_form() {
    let n = 20_000;
    for (f, family) in families().into_iter().enumerate() {
        let spec = TaskSpec {
            family,
            n_classes: 4,
            ..TaskSpec::blobs(11 + f as u64, 0)
        };
        let g = spec.geometry().unwrap();
        let (mean, cov) = g.moments();
        let xs: Vec<Vec<f64>> = g.sample_n(n, &mut seed::rng(100 + f as u64)).into_iter().map(|s| s.features).collect();
        for i in 0..spec.d_x {
            let col: Vec<f64> = xs.iter().map(|x| x[i]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let sd = cov[i][i].sqrt();
            assert!((m - mean[i]).abs() <= 3.0 * sd / (n as f64).sqrt(), "{} mean[{i}]: {m} vs {}", spec.family.name(), mean[i]);
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let m4 = col.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n as f64;
            let se = ((m4 - var * var) / n as f64).sqrt();
            assert!((var - cov[i][i]).abs() <= 3.5 * se, "{} var[{i}]: {var} vs {}", spec.family.name(), cov[i][i]);
        }
    }
}

#[test]
fn features_are_finite_and_splits_disjoint() {
    for family in families() {
        let spec = TaskSpec { family, ..TaskSpec::blobs(3, 4) };
        let (train, test) = generate_task(&spec).unwrap();
        assert_eq!((train.len(), test.len()), (spec.n_train, spec.n_test));
        assert!(train.iter().chain(&test).all(|s| s.features.iter().all(|v| v.is_finite())));
        assert!(train.iter().all(|a| test.iter().all(|b| a.features != b.features)));
    }
}

#[test]
fn streams_are_bit_identical_per_seed() {
    for kind in [StreamKind::MsfirAnalog, StreamKind::PermutedAnalog, StreamKind::SplitAnalog] {
        let a = make_stream(kind, 5, 9).unwrap();
        let b = make_stream(kind, 5, 9).unwrap();
        let c = make_stream(kind, 5, 10).unwrap();
        let bits = |s: &limix_core::TaskStream| -> Vec<u64> {
            (0..s.len())
                .flat_map(|t| s.task_data(t).unwrap().train)
                .flat_map(|x| x.features)
                .map(f64::to_bits)
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }
}

#[test]
fn split_needs_enough_classes() {
    let opts = StreamOptions {
        n_classes: Some(10),
        ..StreamOptions::default()
    };
    assert!(make_stream_with(StreamKind::SplitAnalog, 6, 0, &opts).is_err());
    let s = make_stream_with(StreamKind::SplitAnalog, 5, 0, &opts).unwrap();
    for t in 0..5 {
        assert_eq!(s.tasks[t].active_classes().len(), 2);
    }
}
