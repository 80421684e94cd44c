use std::collections::{BTreeMap, BTreeSet};

use ata_core::execution::FailureClassifier;
use ata_core::memory::Stores;
use ata_core::metrics::{compute_improvement, RewardWeights};
use ata_core::model::{CoverageMap, FailureClass, FailureRecord, FailureSignal, TestId, UnitCoverage};
use ata_core::review::{decide_action, prioritize_targets, RepairAction, ReviewAgent, ReviewConfig, UnitFailure};
use proptest::prelude::*;

fn class() -> impl Strategy<Value = FailureClass> {
    prop_oneof![
        Just(FailureClass::Syntax),
        Just(FailureClass::Environment),
        Just(FailureClass::LogicAssertion)
    ]
}

fn coverage_map() -> impl Strategy<Value = CoverageMap> {
    prop::collection::vec((1u64..40, 0u64..40), 1..12).prop_map(|units| {
        let mut m = CoverageMap::new();
        for (i, (total, covered)) in units.into_iter().enumerate() {
            let mut u = UnitCoverage::new(total);
            u.covered_statements = (1..=covered.min(total) as u32).collect::<BTreeSet<_>>();
            m.insert(format!("u{i:02}"), u);
        }
        m
    })
}

proptest! {
    #[test]
    fn target_order_survives_weight_scaling(
        cov in coverage_map(),
        alpha in 0.0f64..1.0,
        beta in 0.0f64..1.0,
        k in prop::sample::select(vec![0.5f64, 2.0, 4.0, 8.0]),
        risks in prop::collection::vec(0.0f64..=1.0, 12),
    ) {
        prop_assume!(alpha + beta > 0.0);
        let risk: BTreeMap<String, f64> = cov.units.keys().zip(risks).map(|(u, r)| (u.clone(), r)).collect();
        let w = RewardWeights { alpha, beta };
        let scaled = RewardWeights { alpha: alpha * k, beta: beta * k };
        let (a, _) = prioritize_targets(&cov, &risk, &w).unwrap();
        let (b, _) = prioritize_targets(&cov, &risk, &scaled).unwrap();
        let names = |v: &[(String, f64)]| v.iter().map(|(u, _)| u.clone()).collect::<Vec<_>>();
        prop_assert_eq!(names(&a), names(&b));
        prop_assert!(a.windows(2).all(|p| p[0].1 >= p[1].1));
        for (u, weight) in &a {
            let c = cov.unit(u).unwrap().fraction();
            prop_assert!((weight - (alpha * (1.0 - c) + beta * risk[u])).abs() < 1e-12);
        }
    }

    #[test]
    fn repair_table_is_total(c in class(), repeat in 0u32..50, limit in 1u32..10) {
        let a = decide_action(c, repeat, limit);
        let expected = if repeat >= limit {
            RepairAction::Discard
        } else if c == FailureClass::Syntax {
            RepairAction::Regenerate
        } else {
            RepairAction::Patch
        };
        prop_assert_eq!(a, expected);
    }

    #[test]
    fn one_directive_per_failure(
        failures in prop::collection::vec((class(), 0u32..6, 0usize..4), 0..20),
    ) {
        let agent = ReviewAgent::new(FailureClassifier::python(), ReviewConfig::default()).unwrap();
        let stores = Stores::in_memory(16);
        let input: Vec<UnitFailure> = failures
            .iter()
            .enumerate()
            .map(|(i, (c, repeat, unit))| UnitFailure {
                record: FailureRecord {
                    test_id: TestId::of_source(&format!("t{i}")),
                    failure_class: *c,
                    signal: FailureSignal { message: "boom".into(), location: None },
                    hypothesis: "h".into(),
                    repeat_count: *repeat,
                },
                unit: format!("u{unit}"),
                own_record: None,
            })
            .collect();
        let (directives, fresh) = agent.plan_refinement(&input, &[], &stores).unwrap();
        prop_assert_eq!(directives.len(), input.len());
        let discards = directives.iter().filter(|d| d.action == RepairAction::Discard).count();
        prop_assert_eq!(fresh.len(), discards);
        prop_assert!(directives.windows(2).all(|p| p[0].priority >= p[1].priority));
        let ids: BTreeSet<_> = directives.iter().map(|d| d.test_id.clone()).collect();
        prop_assert_eq!(ids, input.iter().map(|f| f.record.test_id.clone()).collect::<BTreeSet<_>>());
    }

    #[test]
    fn improvement_sign_follows_the_change(base in 0.01f64..1000.0, fin in 0.0f64..1000.0) {
        let d = compute_improvement(base, fin).unwrap();
        if d != 0.0 {
            prop_assert_eq!(d > 0.0, fin > base);
        }
        prop_assert!((d - (fin - base) / base * 100.0).abs() <= 0.05 + 1e-9);
    }
}
