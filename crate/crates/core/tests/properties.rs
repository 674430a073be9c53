use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use icudil::metrics::{auc_pr, auc_roc, cohen_kappa, mad, psa, KappaWeighting};
use icudil::seed;
use icudil::strategy::{adjusted_schedule, equal_shares, ewc_penalty, MemoryBuffer, Schedule};
use icudil::tasks::{Target, TaskKind, TaskSample};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
    .prop_filter("both classes present", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
}

fn samples(n: usize, source: usize) -> Vec<TaskSample> {
    (0..n)
        .map(|i| TaskSample {
            input: Arc::new(vec![i as f64]),
            steps: 1,
            task: TaskKind::Ihm,
            target: Target::Binary(i % 2 == 0),
            stay: format!("{source}_{i}"),
            patient_id: i as u64,
            source,
        })
        .collect()
}

proptest! {
    #[test]
    fn auc_roc_invariant_to_monotone_maps((scores, labels) in scored(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let base = auc_roc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        prop_assert!((auc_roc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((auc_roc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn auc_roc_flips_under_negation((scores, labels) in scored()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc_roc(&scores, &labels).unwrap() + auc_roc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_pr_bounded_by_prevalence_and_one((scores, labels) in scored()) {
        let ap = auc_pr(&scores, &labels).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-12);
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        prop_assert!((auc_pr(&perfect, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_and_mad_on_identity(truth in prop::collection::vec(0usize..10, 2..60)) {
        prop_assume!(truth.iter().collect::<BTreeSet<_>>().len() > 1);
        for w in [KappaWeighting::Linear, KappaWeighting::None] {
            prop_assert!((cohen_kappa(&truth, &truth, 10, w).unwrap() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(mad(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn psa_is_mean_and_checks_length(values in prop::collection::vec(0.0f64..1.0, 1..6)) {
        let s = values.len();
        let expect = values.iter().sum::<f64>() / s as f64;
        prop_assert!((psa(&values, s).unwrap() - expect).abs() < 1e-12);
        prop_assert!(psa(&values, s + 1).is_err());
    }

    #[test]
    fn schedule_uses_each_entry_at_most_once(steps in 1usize..3000, frac in 0.0f64..1.0) {
        let buffer = 1 + ((steps.saturating_sub(1)) as f64 * frac) as usize;
        prop_assume!(buffer <= steps);
        let mut seen = BTreeSet::new();
        for i in 0..steps {
            if let Schedule::Adjust(j) = adjusted_schedule(i, steps, buffer).unwrap() {
                prop_assert!(j < buffer);
                prop_assert!(seen.insert(j), "entry {} reused", j);
            }
        }
    }

    #[test]
    fn ewc_penalty_non_negative(
        rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..5.0), 1..50),
        lambda in 0.0f64..20.0,
    ) {
        let theta: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let star: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let fisher: Vec<f64> = rows.iter().map(|r| r.2).collect();
        prop_assert!(ewc_penalty(&theta, &star, &fisher, lambda).unwrap() >= 0.0);
        prop_assert_eq!(ewc_penalty(&star, &star, &fisher, lambda).unwrap(), 0.0);
    }

    #[test]
    fn shares_fill_capacity(available in prop::collection::vec(0usize..400, 1..6), capacity in 0usize..1000) {
        let shares = equal_shares(&available, capacity);
        let total: usize = available.iter().sum();
        prop_assert_eq!(shares.iter().sum::<usize>(), capacity.min(total));
        for (s, a) in shares.iter().zip(&available) {
            prop_assert!(s <= a);
        }
    }

    #[test]
    fn buffer_respects_capacity_and_balance(
        sizes in prop::collection::vec(1usize..300, 1..5),
        capacity in 1usize..200,
        seed_value in any::<u64>(),
    ) {
        let mut rng = seed::rng(seed_value, &[]);
        let mut buffer = MemoryBuffer::new(capacity);
        for (source, &n) in sizes.iter().enumerate() {
            buffer.update(&samples(n, source), source, &mut rng);
            prop_assert!(buffer.len() <= capacity);
            let stays: BTreeSet<&str> = buffer.entries.iter().map(|e| e.sample.stay.as_str()).collect();
            prop_assert_eq!(stays.len(), buffer.len());
            for e in &buffer.entries {
                prop_assert_eq!(e.sample.source, e.source);
            }
            // Sources that had to give up entries hold equal shares, within one.
            let trimmed: Vec<usize> = buffer
                .counts_by_source()
                .into_iter()
                .filter(|(s, c)| *c < sizes[*s])
                .map(|(_, c)| c)
                .collect();
            if let (Some(a), Some(b)) = (trimmed.iter().max(), trimmed.iter().min()) {
                prop_assert!(a - b <= 1);
            }
        }
    }
}
