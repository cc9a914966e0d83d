use proptest::prelude::*;

use smp_core::folds::{ensemble_weighted, median_aggregate};
use smp_core::metrics::{fractional_ranks, mae, spearman_src};

fn values(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![(-1e3..1e3f64), (0..6i32).prop_map(f64::from)],
        len,
    )
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| (values(n..n + 1), values(n..n + 1)))
}

fn distinct_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        let perm = Just((0..n).map(|i| i as f64).collect::<Vec<_>>()).prop_shuffle();
        (perm.clone(), perm)
    })
}

proptest! {
    #[test]
    fn src_invariant_under_increasing_transform((a, b) in pair()) {
        let base = spearman_src(&a, &b).unwrap();
        let warped: Vec<f64> = b.iter().map(|x| x.powi(3) + 2.0 * x + 7.0).collect();
        let got = spearman_src(&a, &warped).unwrap();
        prop_assert!((base.value - got.value).abs() < 1e-12);
        prop_assert_eq!(base.degenerate, got.degenerate);
    }

    #[test]
    fn src_symmetric_and_bounded((a, b) in pair()) {
        let ab = spearman_src(&a, &b).unwrap().value;
        let ba = spearman_src(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn src_negation_flips_without_ties((a, b) in distinct_pair()) {
        let neg: Vec<f64> = b.iter().map(|x| -x).collect();
        let s = spearman_src(&a, &b).unwrap().value;
        let t = spearman_src(&a, &neg).unwrap().value;
        prop_assert!((s + t).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_is_triangular(a in values(1..80)) {
        let n = a.len() as f64;
        let total: f64 = fractional_ranks(&a).iter().sum();
        prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn mae_zero_iff_equal_and_shift_invariant((a, b) in pair(), shift in -50.0..50.0f64) {
        prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let m = mae(&a, &b).unwrap();
        prop_assert_eq!(m == 0.0, a == b);
        let sa: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + shift).collect();
        prop_assert!((mae(&sa, &sb).unwrap() - m).abs() < 1e-9);
    }

    #[test]
    fn median_is_fold_permutation_invariant(
        folds in (1usize..7, 1usize..20).prop_flat_map(|(k, n)| {
            prop::collection::vec(prop::collection::vec(-100.0..100.0f64, n), k)
        }),
        seed in any::<u64>(),
    ) {
        let base = median_aggregate(&folds).unwrap();
        let mut shuffled = folds.clone();
        let k = shuffled.len();
        for i in (1..k).rev() {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        prop_assert_eq!(median_aggregate(&shuffled).unwrap(), base.clone());
        for (i, m) in base.iter().enumerate() {
            let lo = folds.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
            let hi = folds.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *m && *m <= hi);
        }
    }

    #[test]
    fn ensemble_affine_and_swappable((a, b) in pair(), alpha in 0.0..=1.0f64, beta in 0.0..=1.0f64) {
        let ea = ensemble_weighted(&a, &b, alpha).unwrap();
        let swapped = ensemble_weighted(&b, &a, 1.0 - alpha).unwrap();
        for (x, y) in ea.iter().zip(&swapped) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        // affine in alpha: e(t*alpha + (1-t)*beta) = t*e(alpha) + (1-t)*e(beta)
        let eb = ensemble_weighted(&a, &b, beta).unwrap();
        let mid = ensemble_weighted(&a, &b, 0.5 * alpha + 0.5 * beta).unwrap();
        for i in 0..a.len() {
            prop_assert!((mid[i] - 0.5 * (ea[i] + eb[i])).abs() < 1e-9);
        }
    }
}
