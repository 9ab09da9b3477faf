use jrn_core::metrics::depth_metrics;
use jrn_core::{ops, GroundTruth, Tensor, ValidMask};
use proptest::prelude::*;

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-20.0f64..20.0, c * h * w).prop_map(move |d| Tensor::new(c, h, w, d).unwrap())
}

fn sized_tensor() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| tensor(c, h, w))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in (2usize..6, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| tensor(c, h, w))) {
        let p = ops::softmax_channels(&x);
        let plane = x.plane_len();
        for i in 0..plane {
            let s: f64 = (0..x.channels()).map(|c| p.channel(c)[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_ignores_per_pixel_shift(x in sized_tensor(), shift in -50.0f64..50.0) {
        let shifted = x.map(|v| v + shift);
        let (a, b) = (ops::softmax_channels(&x), ops::softmax_channels(&shifted));
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_stays_within_input_range(x in sized_tensor(), oh in 1usize..12, ow in 1usize..12) {
        let y = ops::resize_bilinear(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), (x.channels(), oh, ow));
        for c in 0..x.channels() {
            let lo = x.channel(c).iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.channel(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y.channel(c).iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn resize_preserves_constants(v in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..12, ow in 1usize..12) {
        let y = ops::resize_bilinear(&Tensor::full(2, h, w, v), oh, ow).unwrap();
        prop_assert!(y.data().iter().all(|&x| x == v));
    }

    #[test]
    fn relu_is_idempotent_and_nonnegative(x in sized_tensor()) {
        let once = ops::relu(&x);
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(ops::relu(&once), once);
    }

    #[test]
    fn depth_metrics_scale_as_documented(
        pairs in prop::collection::vec((0.5f64..9.0, 0.5f64..9.0), 1..40),
        lambda in 0.1f64..10.0,
    ) {
        let n = pairs.len();
        let metrics = |s: f64| {
            let gt = Tensor::new(1, 1, n, pairs.iter().map(|p| p.1 * s).collect()).unwrap();
            let gt = GroundTruth::new(gt, vec![0; n], ValidMask::all_valid(1, n)).unwrap();
            depth_metrics(&Tensor::new(1, 1, n, pairs.iter().map(|p| p.0 * s).collect()).unwrap(), &gt).unwrap()
        };
        let (a, b) = (metrics(1.0), metrics(lambda));
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
        prop_assert!(close(a.rel, b.rel));
        prop_assert!(close(a.log10, b.log10));
        prop_assert!(close(a.rms_log, b.rms_log));
        prop_assert!(close(a.rms_linear * lambda, b.rms_linear));
        prop_assert!(close(a.rel_sqr * lambda, b.rel_sqr));
        prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);
        prop_assert!(a.as_array().iter().all(|&v| v >= 0.0));
    }
}
