use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use kg_order::analysis::{hits_at_k, risk_estimate, RiskVisit};
use kg_order::graph::EntityId;
use kg_order::policy::{entropy, interact_subgraphs, softmax, PolicyDims, PolicyParameters, QueryState, Weights};
use kg_order::trainer::{objective_estimate, sample_variance};

fn weights(seed: u64, d: usize) -> Weights {
    let mut dims = PolicyDims::countries(d, 3);
    dims.heads = 2;
    dims.head_dim = 3;
    PolicyParameters::init(dims, 1.0, 1.0, seed).unwrap().weights
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-500.0f64..500.0, 1..40)) {
        let p = softmax(&scores);
        prop_assert_eq!(p.len(), scores.len());
        prop_assert!(p.iter().all(|x| *x >= 0.0 && x.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded_by_log_count(scores in prop::collection::vec(-20.0f64..20.0, 1..40)) {
        let p = softmax(&scores);
        let h = entropy(&p);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn reduction_never_raises_a_weight(
        slots in matrix(4, 3),
        taken in prop::collection::vec(-2.0f64..2.0, 3),
        eta in 0.0f64..3.0,
        rounds in 1usize..5,
    ) {
        let mut q = QueryState::new(slots);
        let taken = Array1::from(taken);
        for _ in 0..rounds {
            let next = q.reduce(taken.view(), eta);
            for (a, b) in q.slot_weights.iter().zip(&next.slot_weights) {
                prop_assert!(b <= a);
                prop_assert!(*b >= 0.0);
            }
            q = next;
        }
    }

    #[test]
    fn interaction_is_permutation_equivariant(summaries in matrix(3, 5), seed in 0u64..50, perm in Just([2usize, 0, 1])) {
        let w = weights(seed, 5);
        let (fused, alphas) = interact_subgraphs(&summaries, &w, 0.7);
        let permuted = summaries.select(ndarray::Axis(0), &perm);
        let (fused_p, _) = interact_subgraphs(&permuted, &w, 0.7);
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in fused_p.row(i).iter().zip(fused.row(src)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
        for alpha in &alphas {
            for row in alpha.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_subgraphs_fuse_identically(row in prop::collection::vec(-2.0f64..2.0, 5), n in 1usize..4, seed in 0u64..50) {
        let summaries = Array2::from_shape_fn((n, 5), |(_, j)| row[j]);
        let (fused, alphas) = interact_subgraphs(&summaries, &weights(seed, 5), 1.3);
        for i in 1..n {
            for (a, b) in fused.row(i).iter().zip(fused.row(0)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        for alpha in &alphas {
            for v in alpha.iter() {
                prop_assert!((v - 1.0 / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hits_is_monotone_in_k(ranked in prop::collection::vec(0usize..30, 0..20), gold in 0usize..30) {
        let ranked: Vec<EntityId> = ranked.into_iter().map(EntityId).collect();
        let h: Vec<usize> = [1, 3, 10, 100].iter().map(|k| hits_at_k(&ranked, EntityId(gold), *k)).collect();
        prop_assert!(h.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(h.iter().all(|x| *x <= 1));
    }

    #[test]
    fn risk_counts_wrong_share(visits in prop::collection::vec((0usize..3, 0usize..2, any::<bool>()), 0..60)) {
        let visits: Vec<RiskVisit> = visits
            .into_iter()
            .map(|(b, sg, wrong)| RiskVisit { bucket: format!("b{b}"), subgraph: sg, wrong })
            .collect();
        let mut expect: BTreeMap<(String, usize), (f64, f64)> = BTreeMap::new();
        for v in &visits {
            let e = expect.entry((v.bucket.clone(), v.subgraph)).or_default();
            e.0 += f64::from(u8::from(v.wrong));
            e.1 += 1.0;
        }
        let risk = risk_estimate(&visits);
        prop_assert_eq!(risk.len(), expect.len());
        for (k, (w, n)) in expect {
            let r = risk[&k];
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, w / n);
        }
    }

    #[test]
    fn variance_ignores_shifts(xs in prop::collection::vec(-5.0f64..5.0, 2..30), c in -50.0f64..50.0, k in 0.0f64..2.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, b) = (sample_variance(&xs), sample_variance(&shifted));
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        let ja = objective_estimate(&xs, k).unwrap();
        let jb = objective_estimate(&shifted, k).unwrap();
        prop_assert!((jb - ja - c).abs() <= 1e-8 * (1.0 + c.abs()));
    }
}
