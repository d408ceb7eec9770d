use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

use fmd_core::diffcore::Graph;
use fmd_core::ot::{
    emd_assignment, emd_bruteforce, fmd_loss, fmd_plan, remd, sinkhorn, FmdOptions, SinkhornOptions, TauMode,
    WeightedFeatureSet,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2usize..7, prop::sample::select(vec![1usize, 2, 8])).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))
}

fn cloud_pair(max_n: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> {
    (2usize..max_n, 2usize..max_n, 1usize..5)
        .prop_flat_map(|(n, m, d)| (matrix(n, 3), matrix(n, d), matrix(m, 3), matrix(m, d)))
}

proptest! {
    #[test]
    fn assignment_matches_enumeration((a, b) in pair()) {
        let a = WeightedFeatureSet::uniform(a).unwrap();
        let b = WeightedFeatureSet::uniform(b).unwrap();
        let exact = emd_bruteforce(&a, &b).unwrap();
        let (cost, plan) = emd_assignment(&a, &b).unwrap();
        prop_assert!((exact - cost).abs() <= 1e-9);
        let n = a.len() as f64;
        for s in plan.row_sums().iter().chain(plan.col_sums().iter()) {
            prop_assert!((s - 1.0 / n).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxation_is_a_lower_bound((a, b) in pair()) {
        let a = WeightedFeatureSet::uniform(a).unwrap();
        let b = WeightedFeatureSet::uniform(b).unwrap();
        let (exact, _) = emd_assignment(&a, &b).unwrap();
        prop_assert!(remd(&a, &b).unwrap() <= exact + 1e-9);
    }

    #[test]
    fn emd_is_symmetric((a, b) in pair()) {
        let a = WeightedFeatureSet::uniform(a).unwrap();
        let b = WeightedFeatureSet::uniform(b).unwrap();
        let ab = emd_assignment(&a, &b).unwrap().0;
        let ba = emd_assignment(&b, &a).unwrap().0;
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_plan_marginals((a, b) in pair(), w in prop::collection::vec(0.1f64..1.0, 6)) {
        let n = a.nrows();
        let wa = Array1::from_iter(w.iter().cycle().take(n).copied());
        let a = WeightedFeatureSet::new(a, wa).unwrap();
        let b = WeightedFeatureSet::uniform(b).unwrap();
        let opts = SinkhornOptions { eps: 5e-2, ..Default::default() };
        let r = sinkhorn(&a, &b, &opts).unwrap();
        prop_assert!(r.converged);
        let s = a.normalized_weights().unwrap();
        let t = b.normalized_weights().unwrap();
        let row_err: f64 = (&r.plan.row_sums() - &s).mapv(f64::abs).sum();
        let col_err: f64 = (&r.plan.col_sums() - &t).mapv(f64::abs).sum();
        prop_assert!(row_err <= 1e-6 && col_err <= 1e-6);
        prop_assert!(r.plan.flow.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn fmd_plan_rows_are_distributions((ps, _, pt, _) in cloud_pair(12), k in 1usize..6, fixed in prop::option::of(0.05f64..5.0)) {
        let k = k.min(pt.nrows());
        let tau = fixed.map_or(TauMode::Adaptive, TauMode::Fixed);
        let plan = fmd_plan(ps.view(), pt.view(), k, tau).unwrap();
        for s in plan.row_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
        let dense = plan.to_dense();
        prop_assert_eq!(dense.dim(), (ps.nrows(), pt.nrows()));
        for row in dense.rows() {
            prop_assert_eq!(row.iter().filter(|&&w| w > 0.0).count() <= k, true);
        }
        // weights never increase with distance
        for (w, d) in plan.stencil.weight.rows().into_iter().zip(plan.distances.rows()) {
            for c in 1..k {
                prop_assert!(d[c] >= d[c - 1]);
                prop_assert!(w[c] <= w[c - 1]);
            }
        }
    }

    #[test]
    fn fmd_identity_is_zero((p, f, _, _) in cloud_pair(12)) {
        let mut g = Graph::new();
        let fr = g.input(f.clone());
        let opts = FmdOptions { k: 1, ..Default::default() };
        let l = fmd_loss(&mut g, fr, p.view(), &f, p.view(), &opts).unwrap();
        prop_assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn fmd_teacher_permutation_invariance((ps, fs, pt, ft) in cloud_pair(10), shift in 0usize..10, k in 1usize..4) {
        let m = pt.nrows();
        let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).rev().collect();
        let opts = FmdOptions { k: k.min(m), ..Default::default() };
        let mut g = Graph::new();
        let fr = g.input(fs);
        let a = fmd_loss(&mut g, fr, ps.view(), &ft, pt.view(), &opts).unwrap();
        let pt2 = pt.select(Axis(0), &perm);
        let ft2 = ft.select(Axis(0), &perm);
        let b = fmd_loss(&mut g, fr, ps.view(), &ft2, pt2.view(), &opts).unwrap();
        prop_assert!((g.scalar(a) - g.scalar(b)).abs() <= 1e-12);
    }

    #[test]
    fn fmd_loss_is_nonnegative((ps, fs, pt, ft) in cloud_pair(10)) {
        let mut g = Graph::new();
        let fr = g.input(fs);
        let opts = FmdOptions { k: 2.min(pt.nrows()), ..Default::default() };
        let l = fmd_loss(&mut g, fr, ps.view(), &ft, pt.view(), &opts).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
    }
}
