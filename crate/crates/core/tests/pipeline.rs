use std::collections::BTreeSet;

use mpgelu::data::{make_splits, toy_generate, Dataset, ProtocolConfig, Standardizer};
use mpgelu::experiment::{run_uci, toy_run, write_result, UciOptions, TABLE_HEADER};
use mpgelu::moment_core::CovarianceMode;
use mpgelu::training::TrainConfig;
use mpgelu::{Architecture, HeadKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(n: usize, q: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * q);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..q).map(|_| rng.random_range(-2.0..2.0)).collect();
        labels.push(row.iter().sum::<f64>().sin() * 3.0 + 10.0 + 0.1 * rng.random_range(-1.0..1.0));
        features.extend(row);
    }
    Dataset::new("synthetic", features, q, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn splits_partition_rows(n in 20usize..300, seed in any::<u64>()) {
        let ds = synthetic(n, 2, 0);
        for s in make_splits(&ds, 3, 0.1, 0.2, seed).unwrap() {
            let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            prop_assert_eq!(s.test.len(), (0.1 * n as f64).round() as usize);
        }
    }

    #[test]
    fn test_sets_do_not_depend_on_validation_fraction(seed in any::<u64>()) {
        let ds = synthetic(120, 2, 0);
        let a = make_splits(&ds, 4, 0.1, 0.2, seed).unwrap();
        let b = make_splits(&ds, 4, 0.1, 0.0, seed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.test, &y.test);
        }
    }
}

#[test]
fn standardizer_is_fit_on_training_rows_only() {
    let ds = Dataset::new(
        "s",
        vec![0.0, 2.0, 4.0, 100.0],
        1,
        vec![1.0, 3.0, 5.0, -50.0],
    )
    .unwrap();
    let st = Standardizer::fit(&ds, &[0, 1, 2]).unwrap();
    let train = st.apply(&ds, &[0, 1, 2]);
    let mean: f64 = train.features().iter().sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((st.destandardize_label(st.standardize_label(-50.0)) + 50.0).abs() < 1e-12);
    assert!((st.standardize_label(3.0)).abs() < 1e-12);
}

#[test]
fn toy_training_is_reproducible() {
    let data = toy_generate(100, 4);
    let tc = TrainConfig {
        epochs: 30,
        ..TrainConfig::toy(4)
    };
    let a = toy_run(Architecture::MpGelu, &data, &tc, 0.001).unwrap();
    let b = toy_run(Architecture::MpGelu, &data, &tc, 0.001).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.points.len(), 200);
    assert!(a
        .points
        .iter()
        .all(|p| p.pred_std > 0.0 && p.pred_std.is_finite()));
}

#[test]
fn uci_protocol_writes_table_rows_for_every_variant() {
    let ds = synthetic(150, 3, 1);
    let dir = tempfile::tempdir().unwrap();
    let variants = [
        (CovarianceMode::Full, HeadKind::Heteroscedastic2),
        (CovarianceMode::Diagonal, HeadKind::Heteroscedastic2),
        (CovarianceMode::Full, HeadKind::Homoscedastic1),
        (CovarianceMode::Diagonal, HeadKind::Homoscedastic1),
    ];
    for arch in [Architecture::MpGelu, Architecture::Relu] {
        for (mode, head) in variants {
            let opts = UciOptions {
                arch,
                mode,
                head,
                train: TrainConfig {
                    epochs: 3,
                    batch_size: 32,
                    ..TrainConfig::uci(0)
                },
                protocol: ProtocolConfig {
                    repeats: 3,
                    hidden_width: 6,
                    ..ProtocolConfig::default()
                },
                dropout: None,
                timing_repetitions: 1,
            };
            let result = run_uci(&ds, &opts).unwrap();
            assert_eq!(result.splits.len(), 3);
            assert!(result.nll_mean.is_finite() && result.rmse_mean > 0.0);
            assert!(result.grid_search.is_some());
            let (json, table) = write_result(dir.path(), &result).unwrap();
            let back: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
            assert_eq!(back["N"], 150);
            let text = std::fs::read_to_string(table).unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next(), Some(TABLE_HEADER));
            let row: Vec<&str> = lines.next().unwrap().split(',').collect();
            assert_eq!(row.len(), 8);
            assert_eq!(&row[..3], &["synthetic", "150", "3"]);
        }
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 16);
}

#[test]
fn fixed_dropout_skips_grid_search() {
    let ds = synthetic(80, 2, 2);
    let opts = UciOptions {
        arch: Architecture::MpGelu,
        mode: CovarianceMode::Diagonal,
        head: HeadKind::Heteroscedastic2,
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::uci(1)
        },
        protocol: ProtocolConfig {
            repeats: 2,
            hidden_width: 4,
            ..ProtocolConfig::default()
        },
        dropout: Some(0.05),
        timing_repetitions: 1,
    };
    let a = run_uci(&ds, &opts).unwrap();
    assert!(a.grid_search.is_none());
    assert_eq!(a.dropout_rate, 0.05);
    let b = run_uci(&ds, &opts).unwrap();
    let strip = |r: &mpgelu::experiment::ExperimentResult| {
        r.splits.iter().map(|s| (s.nll, s.rmse)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}
