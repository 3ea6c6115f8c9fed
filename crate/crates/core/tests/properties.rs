use mhelab_core::accounting::{
    attention_params, extra_over_sha, memory_usage, saving_ratio, sublayer_params, Convention,
};
use mhelab_core::gradcheck::{check_primitives, Tolerance};
use mhelab_core::metrics::{peop, prr, IndicatorKind};
use mhelab_core::{AttentionVariant, Graph, Tensor};
use proptest::prelude::*;
use AttentionVariant::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::from_f64_slice(vec![rows, cols], &v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..6, 1usize..6)
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b).unwrap();
    g.value(c).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primitive_gradients_match_finite_differences(seed in any::<u64>()) {
        for r in check_primitives(seed, &Tolerance::default(), None).unwrap() {
            prop_assert!(r.passed, "{} failed {} of {} (max err {:.2e})", r.group, r.failed, r.checked, r.max_abs_err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        (r, c) in (1usize..6, 1usize..8),
        shift in -500.0f64..500.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::<f64>::rand_uniform(vec![r, c], -20.0, 20.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v += shift);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.softmax_rows(xv).unwrap();
        let out = g.value(s);
        for i in 0..r {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| p.is_finite() && p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Invariant to a constant shift of the row.
            let argmax_in = (0..c).max_by(|&a, &b| x.at(i, a).total_cmp(&x.at(i, b))).unwrap();
            let argmax_out = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            prop_assert_eq!(x.at(i, argmax_in), x.at(i, argmax_out));
        }
    }

    #[test]
    fn matmul_is_associative(
        ((m, k), (p, q)) in dims().prop_map(|(a, b, c, d)| ((a, b), (c, d))),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![k, p], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(vec![p, q], 1.0, &mut rng);
        let left = matmul(&matmul(&a, &b), &c);
        let right = matmul(&a, &matmul(&b, &c));
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn matmul_matches_triple_loop(a in matrix(3, 4), b in matrix(4, 5)) {
        let c = matmul(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|t| a.at(i, t) * b.at(t, j)).sum();
                prop_assert!((c.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prr_reference_is_100_and_monotone(m in 0.1f64..1000.0, s in 0.0f64..1000.0, ds in 0.001f64..10.0) {
        for kind in [IndicatorKind::Direct, IndicatorKind::Inverse] {
            prop_assert!((prr(m, m, kind).unwrap() - 100.0).abs() < 1e-9);
        }
        let d0 = prr(s, m, IndicatorKind::Direct).unwrap();
        let d1 = prr(s + ds, m, IndicatorKind::Direct).unwrap();
        prop_assert!(d1 > d0);
        let i0 = prr(s, m, IndicatorKind::Inverse).unwrap();
        let i1 = prr(s + ds, m, IndicatorKind::Inverse).unwrap();
        prop_assert!(i1 < i0);
        // Direct and inverse forms are reflections around 100.
        prop_assert!((d0 + i0 - 200.0).abs() < 1e-9);
    }

    #[test]
    fn peop_sign_follows_gain(
        sha in 1.0f64..100.0,
        gain in -0.5f64..0.5,
        sha_params in 1u64..1_000_000,
        extra in 1u64..1_000_000,
    ) {
        let score = sha * (1.0 + gain);
        let direct = peop(score, sha, sha_params + extra, sha_params, IndicatorKind::Direct).unwrap();
        let inverse = peop(score, sha, sha_params + extra, sha_params, IndicatorKind::Inverse).unwrap();
        prop_assert!((direct + inverse).abs() < 1e-9);
        prop_assert!(direct * gain >= 0.0);
        let want = gain / (extra as f64 / sha_params as f64);
        prop_assert!((direct - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn accounting_identities(n in 1u64..=256, d in 1u64..=256) {
        let sha = attention_params(Sha, n, d);
        prop_assert_eq!(sha, 3 * n * d * d);
        prop_assert_eq!(attention_params(MheAdd, n, d), attention_params(MheMul, n, d));
        prop_assert_eq!(attention_params(MheMul, n, d) - sha, 3 * n * d);
        prop_assert_eq!(attention_params(Mha, n, d) - sha, (3 * n * n - 3 * n) * d * d);
        prop_assert_eq!(attention_params(Skv, n, d) * 3, attention_params(Mha, n, d) * 2);
        prop_assert_eq!(attention_params(ElAtt, n, d) * 3, attention_params(Mha, n, d));
        for v in AttentionVariant::ALL {
            prop_assert_eq!(extra_over_sha(v, n, d), attention_params(v, n, d) as i64 - sha as i64);
            prop_assert_eq!(
                sublayer_params(v, n, d, Convention::Experiment),
                sublayer_params(v, n, d, Convention::Table4) + n * n * d * d
            );
        }
    }

    #[test]
    fn memory_terms_add_up(p in 0u64..10_000_000, b in 1u64..64, l in 1u64..1024, dm in 1u64..2048) {
        let m = memory_usage(p, b, l, dm);
        prop_assert_eq!(m.total, m.weights + m.gradients + m.adam_states + m.activations);
        prop_assert_eq!(m.weights + m.gradients + m.adam_states, 20 * p);
        prop_assert_eq!(m.activations, 2 * b * l * dm);
        prop_assert!(saving_ratio(m.total, m.total).abs() < 1e-12);
    }
}
