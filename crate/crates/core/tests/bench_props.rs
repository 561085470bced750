use agile_core::bench::{
    compute_metrics, confidence_interval, paired_wins, sign_test, Bench, BenchConfig, Budget, Method, SweepRow, WorldConfig,
};
use agile_core::meta::{MetaConfig, TrainSpec};
use agile_core::model::ModelConfig;
use agile_core::tasks::EpisodeSpec;
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

fn binomial_tail(wins: u64, n: u64) -> f64 {
    // P(X >= wins) for X ~ Bin(n, 1/2), by direct summation.
    let choose = |n: u64, k: u64| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

proptest! {
    #[test]
    fn metric_identities_hold(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..200)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&preds, &labels).unwrap();
        let c = m.confusion;
        prop_assert_eq!(c.total(), preds.len());
        prop_assert!(close(m.accuracy, (c.tp + c.tn) as f64 / c.total() as f64));
        let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        prop_assert!(close(m.accuracy, correct as f64 / preds.len() as f64));
        for v in [m.precision, m.recall, m.f1].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.precision.is_some(), c.tp + c.fp > 0);
        prop_assert_eq!(m.recall.is_some(), c.tp + c.fn_ > 0);
        match (m.precision, m.recall, m.f1) {
            (Some(p), Some(r), Some(f)) => {
                prop_assert!(close(f, 2.0 * p * r / (p + r)));
                prop_assert!(close(f, 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64));
            }
            (_, _, f1) => prop_assert!(f1.is_none() || c.tp == 0),
        }
    }

    #[test]
    fn sign_test_matches_binomial_tail(wins in 0usize..20, losses in 0usize..20) {
        let p = sign_test(wins, losses);
        if wins == 0 {
            prop_assert_eq!(p, 1.0);
        } else {
            let expected = binomial_tail(wins as u64, (wins + losses) as u64);
            prop_assert!((p - expected).abs() < 1e-9, "{} vs {}", p, expected);
        }
    }
}

#[test]
fn confusion_example() {
    // TP 2, FP 1, FN 1, TN 4
    let preds = [1, 1, 1, 0, 0, 0, 0, 0];
    let labels = [1, 1, 0, 1, 0, 0, 0, 0];
    let m = compute_metrics(&preds, &labels).unwrap();
    assert_eq!((m.confusion.tp, m.confusion.fp, m.confusion.fn_, m.confusion.tn), (2, 1, 1, 4));
    assert!(close(m.precision.unwrap(), 2.0 / 3.0));
    assert!(close(m.recall.unwrap(), 2.0 / 3.0));
    assert!(close(m.f1.unwrap(), 2.0 / 3.0));
    assert!(close(m.accuracy, 0.75));
}

#[test]
fn no_positive_predictions_leave_precision_undefined() {
    let m = compute_metrics(&[0, 0, 0], &[0, 1, 0]).unwrap();
    assert_eq!(m.precision, None);
    assert_eq!(m.recall, Some(0.0));
    assert_eq!(m.f1, None);
    assert!(compute_metrics(&[], &[]).is_err());
    assert!(compute_metrics(&[0, 1], &[0]).is_err());
}

#[test]
fn normal_interval_example() {
    let s = confidence_interval(&[0.9, 0.8, 1.0]).unwrap();
    assert!(close(s.mean, 0.9));
    assert!(close(s.std, 0.1));
    let (lo, hi) = s.ci95.unwrap();
    // 0.9 -/+ 1.96 * 0.1 / sqrt(3)
    assert!((lo - 0.786_84).abs() < 1e-5, "{lo}");
    assert!((hi - 1.013_16).abs() < 1e-5, "{hi}");
    assert_eq!(confidence_interval(&[0.5]).unwrap().ci95, None);
}

#[test]
fn paired_wins_ignore_ties() {
    assert_eq!(paired_wins(&[0.9, 0.5, 0.7, 0.2], &[0.8, 0.5, 0.9, 0.1]), (2, 1));
    assert!(close(sign_test(9, 1), 11.0 / 1024.0));
}

fn tiny_config() -> BenchConfig {
    BenchConfig {
        model: ModelConfig {
            input_shape: (8, 8, 7),
            blocks: 2,
            filters: 4,
            ..ModelConfig::default()
        },
        world: WorldConfig {
            patch_size: 8,
            real_tasks: 1,
            meta_samples: 40,
            real_samples: 200,
            amplitude: (0.6, 1.0),
            ..WorldConfig::default()
        },
        meta: MetaConfig {
            iterations: 2,
            checkpoint_every: 0,
            episode: EpisodeSpec::default().with_k(2),
            ..MetaConfig::desk_scale()
        },
        vanilla: TrainSpec {
            minibatch: 16,
            ..TrainSpec::default()
        },
        runs: 5,
        curve_steps: 1,
        calibration: 64,
        ..BenchConfig::desk_scale()
    }
}

#[test]
fn vanilla_accuracy_grows_with_training_size() {
    let mut bench = Bench::new(tiny_config(), None).unwrap();
    let sizes = [Budget::Count(2), Budget::Percent(10.0), Budget::Percent(60.0)];
    let rows = bench.sweep_training_size(Method::VanillaLimit, &sizes, 0).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.result.aggregate.as_ref().unwrap().accuracy.mean).collect();
    assert_eq!(rows.iter().map(|r| r.result.samples()).collect::<Vec<_>>(), vec![Some(2), Some(20), Some(120)]);
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
    assert!(means[2] > means[0], "{means:?}");
}

#[test]
fn empty_sweep_is_empty() {
    let mut bench = Bench::new(tiny_config(), None).unwrap();
    let rows: Vec<SweepRow> = bench.sweep_training_size(Method::Maml, &[], 0).unwrap();
    assert!(rows.is_empty());
}
