mod common;

use common::*;
use gdcn_core::metrics::{accuracy, kmeans, lloyd, nmi, purity, MetricsReport};
use gdcn_core::tensor::Tensor;
use proptest::prelude::*;

fn partitions() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..=5, 1usize..=12).prop_flat_map(|(k, n)| {
        (
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(0..k, n),
        )
    })
}

proptest! {
    #[test]
    fn accuracy_matches_exhaustive_search((pred, truth) in partitions()) {
        prop_assert_eq!(accuracy(&pred, &truth).unwrap(), accuracy_oracle(&pred, &truth));
    }

    #[test]
    fn nmi_and_purity_match_direct_formulas((pred, truth) in partitions()) {
        prop_assert!((nmi(&pred, &truth).unwrap() - nmi_oracle(&pred, &truth)).abs() <= 1e-10);
        prop_assert!((purity(&pred, &truth).unwrap() - purity_oracle(&pred, &truth)).abs() <= 1e-10);
    }

    #[test]
    fn metrics_ignore_relabeling((pred, truth) in partitions(), shift in 0usize..5) {
        let k = 5;
        let relabel = |v: &[usize]| v.iter().map(|&l| (l + shift) % k).collect::<Vec<_>>();
        let base = MetricsReport::compute(&pred, &truth).unwrap();
        let moved = MetricsReport::compute(&relabel(&pred), &truth).unwrap();
        prop_assert!((base.acc - moved.acc).abs() < 1e-12);
        prop_assert!((base.nmi - moved.nmi).abs() < 1e-12);
        prop_assert!((base.pur - moved.pur).abs() < 1e-12);
        let nmi_truth_moved = nmi(&pred, &relabel(&truth)).unwrap();
        prop_assert!((base.nmi - nmi_truth_moved).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval((pred, truth) in partitions()) {
        let r = MetricsReport::compute(&pred, &truth).unwrap();
        for v in [r.acc, r.nmi, r.pur] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn balanced_truth_bounds_acc_and_purity(k in 1usize..=5, per in 1usize..=4, seed in any::<u64>()) {
        let truth: Vec<usize> = (0..k * per).map(|i| i / per).collect();
        let mut r = rng(seed);
        let pred: Vec<usize> = truth.iter().map(|_| rand::Rng::random_range(&mut r, 0..k)).collect();
        let report = MetricsReport::compute(&pred, &truth).unwrap();
        prop_assert!(report.acc >= 1.0 / k as f64 - 1e-12);
        prop_assert!(report.pur >= 1.0 / k as f64 - 1e-12);
    }

    #[test]
    fn lloyd_inertia_never_increases(seed in any::<u64>(), n in 4usize..40, k in 1usize..4) {
        let mut r = rng(seed);
        let points = random_matrix(&mut r, n, 2, 5.0);
        let init = points.select_rows(&(0..k).collect::<Vec<_>>());
        let result = lloyd(&points, init, 300);
        for pair in result.inertia_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9, "{:?}", result.inertia_trace);
        }
        prop_assert!(result.inertia >= 0.0);
        // every sample sits at its nearest centroid
        for i in 0..n {
            let d = |c: usize| -> f64 {
                points.row(i).iter().zip(result.centroids.row(c)).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let own = d(result.assignments[i]);
            prop_assert!((0..k).all(|c| own <= d(c) + 1e-12));
        }
    }
}

#[test]
fn reference_cases() {
    assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    assert_eq!(purity(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
    assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    assert_eq!(nmi(&[2, 2, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(purity(&[0; 6], &[0, 0, 1, 1, 2, 2]).unwrap(), 1.0 / 3.0);
    assert!(accuracy(&[0, 1], &[0]).is_err());
}

/// All 2-partitions of the points, scored by inertia.
fn best_two_partition(values: &[f64]) -> (f64, Vec<bool>) {
    let n = values.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 1..(1u32 << n) - 1 {
        let side: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let mut inertia = 0.0;
        for s in [true, false] {
            let members: Vec<f64> = values.iter().zip(&side).filter(|(_, &m)| m == s).map(|(v, _)| *v).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            inertia += members.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        if inertia < best.0 {
            best = (inertia, side);
        }
    }
    best
}

#[test]
fn kmeans_splits_at_the_gap() {
    let values = [0.0, 0.1, 0.2, 9.0, 9.1, 9.2];
    let points = Tensor::matrix(6, 1, values.to_vec()).unwrap();
    let (oracle_inertia, oracle_side) = best_two_partition(&values);
    let result = kmeans(&points, 2, 10, 7).unwrap();
    assert!((result.inertia - oracle_inertia).abs() < 1e-9);
    for i in 0..6 {
        for j in 0..6 {
            let same = result.assignments[i] == result.assignments[j];
            assert_eq!(same, oracle_side[i] == oracle_side[j]);
        }
    }
}

#[test]
fn kmeans_closed_forms() {
    let points = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0], [9.0, -1.0]]).unwrap();
    let exact = kmeans(&points, 3, 10, 1).unwrap();
    assert_eq!(exact.inertia, 0.0);
    assert_eq!(accuracy(&exact.assignments, &[0, 0, 1, 1, 2]).unwrap(), 1.0);

    let single = kmeans(&points, 1, 3, 1).unwrap();
    let mean = [(19.0) / 5.0, 9.0 / 5.0];
    let expected: f64 = (0..5)
        .map(|i| (points.get(i, 0) - mean[0]).powi(2) + (points.get(i, 1) - mean[1]).powi(2))
        .sum();
    assert!((single.inertia - expected).abs() < 1e-9);
    assert!((single.centroids.get(0, 0) - mean[0]).abs() < 1e-12);

    assert!(kmeans(&points, 6, 1, 1).is_err());
    assert_eq!(
        kmeans(&points, 2, 4, 11).unwrap().assignments,
        kmeans(&points, 2, 4, 11).unwrap().assignments
    );
}

#[test]
fn report_json_has_six_decimals() {
    let r = MetricsReport { acc: 0.98, nmi: 0.944, pur: 1.0 };
    assert_eq!(r.to_json(), r#"{"acc": 0.980000, "nmi": 0.944000, "pur": 1.000000}"#);
}
