use cyclebalance::baselines::{cbl_weights, cost_sensitive_weights, threshold_shift};
use cyclebalance::datasets::{paired_schedule, shuffled_schedule, ClassLabel};
use cyclebalance::evaluation::{acsa, f1, ConfusionMatrix, ResultTable};
use cyclebalance::training::LrSchedule;
use proptest::prelude::*;

proptest! {
    #[test]
    fn paired_schedule_covers_both_classes(n_a in 1usize..60, n_b in 1usize..60, bs in 1usize..9, seed: u64, epoch in 0usize..5) {
        let batches = paired_schedule(n_a, n_b, bs, seed, epoch).unwrap();
        let mut a: Vec<usize> = batches.iter().flat_map(|b| b.a.clone()).collect();
        let b: Vec<usize> = batches.iter().flat_map(|b| b.b.clone()).collect();
        prop_assert_eq!(a.len(), n_a.max(n_b));
        prop_assert_eq!(b.len(), n_a.max(n_b));
        for batch in &batches {
            prop_assert_eq!(batch.a.len(), batch.b.len());
            prop_assert!(batch.a.len() <= bs);
        }
        if n_a >= n_b {
            a.sort_unstable();
            prop_assert_eq!(a, (0..n_a).collect::<Vec<_>>());
        }
        for i in 0..n_b.min(n_a) {
            prop_assert!(b.contains(&i));
        }
        prop_assert_eq!(&batches, &paired_schedule(n_a, n_b, bs, seed, epoch).unwrap());
    }

    #[test]
    fn shuffled_schedule_is_a_partition(n in 1usize..100, bs in 1usize..17, seed: u64) {
        let mut all: Vec<usize> = shuffled_schedule(n, bs, seed, 0).unwrap().concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cbl_weights_sum_to_class_count_and_favor_rare_classes(a in 1usize..5000, b in 1usize..5000, beta in 0.0f64..0.99999) {
        let w = cbl_weights(&[a, b], beta).unwrap();
        prop_assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
        if a > b {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn cost_sensitive_weights_balance_class_mass(a in 1usize..5000, b in 1usize..5000) {
        let (wa, wb) = cost_sensitive_weights(a, b).unwrap();
        prop_assert!((wa * a as f64 - wb * b as f64).abs() < 1e-9 * (a + b) as f64);
    }

    #[test]
    fn threshold_shift_is_argmax_of_prior_corrected_scores(p in 0.0f64..1.0, pa in 0.01f64..1.0) {
        let priors = (pa, 1.0 - pa + 1e-3);
        let got = threshold_shift((1.0 - p, p), priors).unwrap();
        let (sa, sb) = ((1.0 - p) / priors.0, p / priors.1);
        prop_assume!((sa - sb).abs() > 1e-12);
        prop_assert_eq!(got, if sb > sa { ClassLabel::B } else { ClassLabel::A });
    }

    #[test]
    fn metrics_stay_in_range_and_acsa_ignores_labels(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
        let cm = ConfusionMatrix { tp, fp, tn, fn_ };
        for c in [ClassLabel::A, ClassLabel::B] {
            prop_assert!((0.0..=1.0).contains(&f1(&cm, c)));
        }
        prop_assert!((0.0..=1.0).contains(&acsa(&cm)));
        prop_assert_eq!(acsa(&cm), acsa(&cm.relabeled()));
        prop_assert_eq!(f1(&cm, ClassLabel::B), f1(&cm.relabeled(), ClassLabel::A));
    }

    #[test]
    fn decay_schedule_is_non_increasing(c in 0usize..100, d in 1usize..200) {
        let s = LrSchedule::ConstantThenLinearDecay { constant_epochs: c, decay_epochs: d };
        let lrs: Vec<f64> = (0..c + d + 5).map(|e| s.lr_at(1.0, e)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[c + d], 0.0);
    }

    #[test]
    fn result_table_csv_round_trips(values in proptest::collection::vec(0.0f64..1.0, 1..6)) {
        let columns: Vec<usize> = (0..values.len()).map(|i| 10 * (i + 1)).collect();
        let rounded: Vec<Option<f64>> = values.iter().map(|v| Some((v * 1e4).round() / 1e4)).collect();
        let table = ResultTable { columns, rows: vec![("aug".into(), rounded)] };
        prop_assert_eq!(ResultTable::from_csv(&table.to_csv()).unwrap(), table);
    }
}
