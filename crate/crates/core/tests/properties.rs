//! Randomised invariants.

use cdnet_core::augment::{augment, flip_horizontal, flip_vertical};
use cdnet_core::dataset::{generate_synthetic_pair, tiles_along};
use cdnet_core::metrics::{confusion, decode_confusion_map, f1_from, render_confusion_map, scores};
use cdnet_core::{AugmentConfig, ConfusionStats, Difficulty, Graph, Tensor};
use proptest::prelude::*;

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f32>> {
    proptest::collection::vec(-1.0f32..1.0, c * h * w).prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8,
                                      data in proptest::collection::vec(-30.0f64..30.0, 48)) {
        let t = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input(&t);
        let s = g.softmax_rows(x).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_keeps_constant_maps_constant(v in -5.0f64..5.0, h in 1usize..9, w in 1usize..9,
                                           th in 1usize..17, tw in 1usize..17) {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::from_fn(vec![2, h, w], |_| v));
        let y = g.resize(x, (th, tw)).unwrap();
        prop_assert_eq!(g.shape(y), &[2, th, tw][..]);
        prop_assert!(g.value(y).iter().all(|&o| (o - v).abs() < 1e-12));
    }

    #[test]
    fn scores_are_consistent(tp in 1u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..100_000) {
        let s = scores(&ConfusionStats::new(tp, fp, fn_, tn)).unwrap();
        prop_assert!(s.iou <= s.f1);
        prop_assert!((s.f1 - f1_from(s.precision, s.recall)).abs() < 1e-12);
        for v in [s.precision, s.recall, s.f1, s.iou, s.oa] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn confusion_map_round_trips(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(0u8..4, 144)) {
        let n = h * w;
        let pred: Vec<u8> = bits[..n].iter().map(|b| b & 1).collect();
        let gt: Vec<u8> = bits[..n].iter().map(|b| b >> 1).collect();
        let img = render_confusion_map(&pred, &gt, (h, w)).unwrap();
        prop_assert_eq!(decode_confusion_map(&img).unwrap(), confusion(&pred, &gt).unwrap());
    }

    #[test]
    fn flips_are_involutions(t in tensor(3, 5, 7)) {
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(&t).unwrap()).unwrap(), &t);
        prop_assert_eq!(&flip_vertical(&flip_vertical(&t).unwrap()).unwrap(), &t);
    }

    #[test]
    fn tile_count_is_floor_division(extent in 0usize..5000, patch in 1usize..600) {
        let n = tiles_along(extent, patch);
        prop_assert!(n * patch <= extent);
        prop_assert!((n + 1) * patch > extent);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_keeps_shapes_and_binary_labels(seed in any::<u64>()) {
        let pair = generate_synthetic_pair(seed % 97, 64, Difficulty::Medium);
        let out = augment(&pair, &AugmentConfig::default(), seed).unwrap();
        prop_assert_eq!(out.t1.shape(), pair.t1.shape());
        prop_assert_eq!(out.t2.shape(), pair.t2.shape());
        prop_assert_eq!(out.label.shape(), pair.label.shape());
        prop_assert!(out.label.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(out.t1.data().iter().chain(out.t2.data()).all(|v| v.is_finite()));
    }
}
