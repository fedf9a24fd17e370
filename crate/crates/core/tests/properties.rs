//! Property tests over randomized inputs.

use endodepth_core::geometry::{BilinearTap, DepthMap, ImageBuffer, ValidityMask};
use endodepth_core::metrics::{compute_metrics, median_scale, MetricsConfig};
use endodepth_core::teaching::{
    cross_teaching_loss, self_teaching_loss, CONSISTENCY_EPS,
};
use proptest::prelude::*;

fn depth_map(w: usize, h: usize) -> impl Strategy<Value = DepthMap> {
    proptest::collection::vec(40.0..150.0f64, w * h)
        .prop_map(move |d| DepthMap::new(w, h, d).unwrap())
}

proptest! {
    #[test]
    fn bilinear_weights_partition_unity(
        x in -5.0..20.0f64,
        y in -5.0..15.0f64,
    ) {
        let tap = BilinearTap::new(x, y, 13, 9);
        let sum = tap.w00 + tap.w10 + tap.w01 + tap.w11;
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(tap.w00 >= 0.0 && tap.w10 >= 0.0 && tap.w01 >= 0.0 && tap.w11 >= 0.0);
        prop_assert!(tap.x1 < 13 && tap.y1 < 9);
    }

    #[test]
    fn bilinear_sample_stays_in_value_range(
        x in -2.0..12.0f64,
        y in -2.0..10.0f64,
        seed in 0u64..1000,
    ) {
        let mut s = seed.wrapping_add(1);
        let img = ImageBuffer::from_fn(9, 7, 1, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        }).unwrap();
        let mut out = [0.0];
        img.sample(x, y, &mut out);
        prop_assert!((0.0..=1.0).contains(&out[0]));
    }

    #[test]
    fn median_scaling_is_homogeneous(d in depth_map(6, 5), c in 0.1..10.0f64) {
        let pred = d.map(|v| v * c).unwrap();
        let (scaled, factor) = median_scale(&pred, &d).unwrap();
        prop_assert!((factor - 1.0 / c).abs() < 1e-9 * (1.0 / c));
        for (s, g) in scaled.data().iter().zip(d.data()) {
            prop_assert!((s - g).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_nonnegative_and_delta_bounded(
        pred in depth_map(5, 4),
        gt in depth_map(5, 4),
    ) {
        let r = compute_metrics(&pred, &gt, &MetricsConfig::default()).unwrap();
        prop_assert!(r.abs_rel >= 0.0 && r.sq_rel >= 0.0);
        prop_assert!(r.rmse >= 0.0 && r.rmse_log >= 0.0);
        prop_assert!((0.0..=100.0).contains(&r.delta));
        prop_assert_eq!(r.n, 20);
    }

    #[test]
    fn consistency_losses_bounded_and_scale_invariant(
        a in depth_map(4, 4),
        b in depth_map(4, 4),
        c in 0.5..2.0f64,
    ) {
        let l = cross_teaching_loss(&a, &b, CONSISTENCY_EPS).unwrap();
        prop_assert!((0.0..1.0).contains(&l.value));
        // joint scaling is exact with eps = 0
        let l0 = cross_teaching_loss(&a, &b, 0.0).unwrap();
        let ls = cross_teaching_loss(
            &a.map(|v| v * c).unwrap(),
            &b.map(|v| v * c).unwrap(),
            0.0,
        ).unwrap();
        prop_assert!((l0.value - ls.value).abs() < 1e-12);
    }

    #[test]
    fn self_teaching_mask_monotone(
        a in depth_map(4, 4),
        b in depth_map(4, 4),
    ) {
        // all-false mask is exactly zero; full mask equals cross loss value
        let empty = ValidityMask::filled(4, 4, false);
        let full = ValidityMask::filled(4, 4, true);
        let l_empty = self_teaching_loss(&a, &b, &empty, CONSISTENCY_EPS).unwrap();
        prop_assert_eq!(l_empty.value, 0.0);
        let l_full = self_teaching_loss(&a, &b, &full, CONSISTENCY_EPS).unwrap();
        let l_cross = cross_teaching_loss(&b, &a, CONSISTENCY_EPS).unwrap();
        prop_assert!((l_full.value - l_cross.value).abs() < 1e-15);
    }
}
