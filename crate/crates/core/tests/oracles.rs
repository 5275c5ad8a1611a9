mod common;

use allsky::anchors::{kmeans_box_priors, rotated_iou};
use allsky::rng::XorShift64Star;

#[test]
fn kmeans_matches_exhaustive_partition_optimum() {
    let boxes = common::three_cluster_shapes(12, 5);
    let optimum = common::exhaustive_kmeans_optimum(&boxes, 8);
    for k in 1..=8 {
        let got = kmeans_box_priors(&boxes, k, 3, 1024).unwrap().avg_iou;
        assert!(
            (got - optimum[k - 1]).abs() < 1e-9,
            "K = {k}: kmeans {got} vs optimum {}",
            optimum[k - 1]
        );
    }
}

#[test]
fn rotated_iou_matches_monte_carlo() {
    let mut rng = XorShift64Star::for_stream(17, 0);
    for _ in 0..40 {
        let a = common::random_box(&mut rng);
        let b = common::random_box(&mut rng);
        let mc = common::monte_carlo_iou(&a, &b, 1000, &mut rng);
        let exact = rotated_iou(&a, &b);
        assert!((mc - exact).abs() < 1e-3, "{a:?} {b:?}: {exact} vs {mc}");
    }
}
