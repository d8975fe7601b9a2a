// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use explguide::basis::rank_candidates;
use explguide::edit::{neglect_loss, select_lambda};
use explguide::eval::{detection_eval, heatmap_pr, otsu_threshold, Detection, GroundTruth};
use explguide::layout::{coco_layout_filter, dice_term, expl_mask, BoundingBox, MaskParams};
use explguide::prompt::class_distribution;
use explguide::relevance::compute_relevance;
use ndarray::Array2;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x0, y0, w, h)| {
        bbox(x0, y0, (x0 + w * (1.0 - x0)).max(x0 + 1e-3).min(1.0), (y0 + h * (1.0 - y0)).max(y0 + 1e-3).min(1.0))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn relevance_maps_are_identity_plus_nonnegative(seed in any::<u64>()) {
        let t = random_trace(&mut rng(seed));
        let maps = compute_relevance(&t).unwrap();
        for m in [&maps.text, &maps.image] {
            for ((i, j), &v) in m.indexed_iter() {
                let floor = if i == j { 1.0 } else { 0.0 };
                prop_assert!(v >= floor);
            }
        }
        for s in t.special_text_positions() {
            prop_assert_eq!(maps.token_scores[s], 0.0);
        }
        prop_assert!(maps.patch_heatmap.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn padding_content_is_ignored(seed in any::<u64>(), fill in 0.0..1.0f64) {
        let mut t = random_trace(&mut rng(seed));
        prop_assume!(!t.text_padding.is_empty());
        let before = compute_relevance(&t).unwrap();
        let pad = t.text_padding.clone();
        for rec in &mut t.text_layers {
            for &p in &pad {
                rec.gradient.slice_mut(ndarray::s![.., p, ..]).fill(fill);
                rec.gradient.slice_mut(ndarray::s![.., .., p]).fill(fill);
            }
        }
        let after = compute_relevance(&t).unwrap();
        prop_assert_eq!(before.token_scores, after.token_scores);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let x = a.iou(&b);
        prop_assert_eq!(x, b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rasterized_coverage_sums_to_area(b in arb_box(), rows in 1usize..9, cols in 1usize..9) {
        let g = b.rasterize((rows, cols));
        let total: f64 = g.sum() / (rows * cols) as f64;
        prop_assert!((total - b.area_ratio()).abs() < 1e-9);
        prop_assert!(g.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        for (bin, cover) in b.rasterize_binary((rows, cols)).iter().zip(g.iter()) {
            prop_assert!(!*bin || *cover > 0.0);
        }
    }

    #[test]
    fn layout_filter_keeps_a_largest_prefix_under_half(boxes in prop::collection::vec(arb_box(), 0..8)) {
        let kept = coco_layout_filter(&boxes);
        let areas: Vec<f64> = kept.iter().map(|b| b.area_ratio()).collect();
        prop_assert!(areas.iter().sum::<f64>() < 0.5);
        prop_assert!(areas.windows(2).all(|w| w[0] >= w[1]));
        let mut all: Vec<f64> = boxes.iter().map(|b| b.area_ratio()).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(&all[..kept.len()], &areas[..]);
        if kept.len() < all.len() {
            prop_assert!(areas.iter().sum::<f64>() + all[kept.len()] >= 0.5);
        }
    }

    #[test]
    fn dice_and_mask_stay_in_unit_range(
        hm in prop::collection::vec(0.0..5.0f64, 12),
        b in arb_box(),
    ) {
        let hm = Array2::from_shape_vec((3, 4), hm).unwrap();
        prop_assume!(hm.iter().any(|&v| v > 0.0));
        let mask = expl_mask(&hm, MaskParams::default()).unwrap();
        prop_assert!(mask.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let d = dice_term(&mask, &b.rasterize((3, 4))).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn otsu_matches_exhaustive_search(values in prop::collection::vec(0.0..10.0f64, 2..40)) {
        let got = otsu_threshold(&values).ok();
        prop_assert_eq!(got.map(|o| o.bin), brute_force_otsu(&values));
        if let Some(o) = got {
            prop_assert!(values.iter().any(|&v| o.is_foreground(v)));
            prop_assert!(values.iter().any(|&v| !o.is_foreground(v)));
        }
    }

    #[test]
    fn pr_scores_are_bounded(hm in prop::collection::vec(0.0..1.0f64, 16), b in arb_box()) {
        let hm = Array2::from_shape_vec((4, 4), hm).unwrap();
        let s = heatmap_pr(&hm, &[b]).unwrap();
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn detection_eval_agrees_with_reference(
        gts in prop::collection::vec((0usize..2, arb_box()), 1..5),
        dets in prop::collection::vec((0usize..2, arb_box(), 0.0..1.0f64), 0..6),
    ) {
        let labels = ["dog", "cat"];
        let images = vec![(
            gts.iter().map(|(l, b)| GroundTruth { label: labels[*l].into(), bbox: *b }).collect::<Vec<_>>(),
            dets.iter().map(|(l, b, s)| Detection { label: labels[*l].into(), bbox: *b, score: *s }).collect::<Vec<_>>(),
        )];
        let r = detection_eval(&images);
        let (ap, ap50, ar) = coco_reference(&images);
        prop_assert_eq!((r.ap, r.ap50, r.ar), (ap, ap50, ar));
        prop_assert!((0.0..=1.0).contains(&r.ap) && r.ap <= r.ap50);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(
        scores in prop::collection::vec((-1.0..1.0f64, 0.0..1.0f64), 1..12),
        lambda in 0.0..2.0f64,
    ) {
        let r = rank_candidates(&scores, lambda);
        let mut idx: Vec<usize> = r.iter().map(|c| c.index).collect();
        prop_assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..scores.len()).collect::<Vec<_>>());
    }

    #[test]
    fn lambda_selection_matches_linear_scan(sims in prop::collection::vec(0i32..4, 1..9)) {
        let entries: Vec<(f64, f64)> = sims.iter().enumerate().map(|(i, &s)| (i as f64 * 0.5, s as f64)).collect();
        let best = sims.iter().max().unwrap();
        let first = sims.iter().position(|s| s == best).unwrap();
        prop_assert_eq!(select_lambda(&entries), Some(first));
    }

    #[test]
    fn neglect_loss_scales_with_lambda(scores in prop::collection::vec(0.0..1.0f64, 1..5), lambda in 0.0..4.0f64) {
        let one = neglect_loss(&scores, 1.0).unwrap();
        prop_assert!((neglect_loss(&scores, lambda).unwrap() - lambda * one).abs() < 1e-12);
        prop_assert_eq!(neglect_loss(&scores, 0.0).unwrap(), 0.0);
        prop_assert!(one <= 0.0);
    }

    #[test]
    fn class_distribution_is_a_distribution(sims in prop::collection::vec(-1.0..1.0f64, 1..10), scale in 0.1..100.0f64) {
        let p = class_distribution(&sims, scale).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }
}
