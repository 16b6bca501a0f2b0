mod common;

use common::rng;
use evseg::metrics::{
    consistency_sets, mvc, video_consistency, ConfusionMatrix, MvcAccumulator, SegMask, VcDenominator,
    IGNORE_INDEX,
};
use evseg::Error;
use evseg_oracles as oracle;
use proptest::prelude::*;
use rand::Rng;

fn mask(h: usize, w: usize, labels: &[u8]) -> SegMask {
    SegMask::new(h, w, labels.to_vec()).unwrap()
}

fn random_masks(n: usize, h: usize, w: usize, k: u8, seed: u64, ignore_rate: f64) -> Vec<SegMask> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let labels = (0..h * w)
                .map(|_| if r.random_bool(ignore_rate) { IGNORE_INDEX } else { r.random_range(0..k) })
                .collect::<Vec<_>>();
            mask(h, w, &labels)
        })
        .collect()
}

/// Sequences with long runs of repeated labels so consistency sets are not
/// trivially empty.
fn sticky_masks(n: usize, h: usize, w: usize, k: u8, seed: u64, flip: f64) -> Vec<SegMask> {
    let mut r = rng(seed);
    let mut cur: Vec<u8> = (0..h * w).map(|_| r.random_range(0..k)).collect();
    (0..n)
        .map(|_| {
            for v in cur.iter_mut() {
                if r.random_bool(flip) {
                    *v = r.random_range(0..k);
                }
            }
            mask(h, w, &cur)
        })
        .collect()
}

#[test]
fn identical_masks_fill_the_diagonal() {
    let m = random_masks(1, 6, 6, 4, 0, 0.0).remove(0);
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&m, &m).unwrap();
    for g in 0..4 {
        for p in 0..4 {
            if g != p {
                assert_eq!(cm.get(g, p), 0);
            }
        }
    }
    assert_eq!(cm.total(), 36);
}

#[test]
fn ignored_pixels_leave_state_unchanged() {
    let gt = SegMask::filled(3, 3, IGNORE_INDEX);
    let pred = SegMask::filled(3, 3, 1);
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &gt).unwrap();
    assert_eq!(cm, ConfusionMatrix::new(3));
}

#[test]
fn hand_counted_two_by_two() {
    let gt = mask(2, 2, &[0, 1, 1, 0]);
    let pred = mask(2, 2, &[0, 1, 0, 0]);
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt).unwrap();
    assert_eq!(cm.counts, vec![2, 0, 1, 1]);
    assert!(matches!(cm.accumulate(&mask(1, 4, &[0; 4]), &gt), Err(Error::Shape(_))));
    assert!(matches!(cm.accumulate(&mask(2, 2, &[0, 2, 0, 0]), &gt), Err(Error::Data(_))));
}

#[test]
fn confusion_matches_loop_oracle() {
    let gts = random_masks(5, 8, 8, 5, 1, 0.1);
    let preds = random_masks(5, 8, 8, 5, 2, 0.0);
    let mut cm = ConfusionMatrix::new(5);
    for (p, g) in preds.iter().zip(&gts) {
        cm.accumulate(p, g).unwrap();
    }
    let frames: Vec<(&[u8], &[u8])> = preds.iter().zip(&gts).map(|(p, g)| (&p.labels[..], &g.labels[..])).collect();
    let expected = oracle::confusion(&frames, 5, IGNORE_INDEX);
    assert_eq!(cm.counts, expected.concat());
    let report = cm.iou();
    let (per, miou, wiou) = oracle::iou(&expected);
    for (a, b) in report.per_class.iter().zip(&per) {
        assert!((a.unwrap() - b.unwrap()).abs() < 1e-10);
    }
    assert!((report.miou.unwrap() - miou.unwrap()).abs() < 1e-10);
    assert!((report.wiou.unwrap() - wiou.unwrap()).abs() < 1e-10);
}

#[test]
fn iou_examples() {
    let m = mask(2, 2, &[0, 1, 2, 1]);
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&m, &m).unwrap();
    let r = cm.iou();
    assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), Some(1.0), None]);
    assert_eq!((r.miou, r.wiou), (Some(1.0), Some(1.0)));

    let empty = ConfusionMatrix::new(3).iou();
    assert_eq!((empty.miou, empty.wiou), (None, None));
    assert!(empty.per_class.iter().all(Option::is_none));

    // 4x4, gt: 4 pixels of class 0 and 12 of class 1; two class-0 pixels
    // predicted as class 1.
    let gt: Vec<u8> = [0; 4].into_iter().chain([1; 12]).collect();
    let pred: Vec<u8> = [0; 2].into_iter().chain([1; 14]).collect();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&mask(4, 4, &pred), &mask(4, 4, &gt)).unwrap();
    let r = cm.iou();
    let (iou0, iou1) = (2.0 / 4.0, 12.0 / 14.0);
    assert!((r.miou.unwrap() - (iou0 + iou1) / 2.0).abs() < 1e-15);
    assert!((r.wiou.unwrap() - (0.25 * iou0 + 0.75 * iou1)).abs() < 1e-15);
}

#[test]
fn vc_examples() {
    let gts = sticky_masks(6, 4, 4, 3, 3, 0.2);
    assert_eq!(video_consistency(&gts, &gts, VcDenominator::Gt).unwrap(), 1.0);
    assert_eq!(video_consistency(&gts, &gts, VcDenominator::Pred).unwrap(), 1.0);

    // gt consistent everywhere, prediction consistent and right on half.
    let g = mask(2, 2, &[1, 1, 2, 2]);
    let gts = vec![g.clone(), g.clone(), g.clone()];
    let preds = vec![g.clone(), mask(2, 2, &[1, 1, 0, 0]), g.clone()];
    assert_eq!(video_consistency(&gts, &preds, VcDenominator::Gt).unwrap(), 0.5);
    assert_eq!(video_consistency(&gts, &preds, VcDenominator::Pred).unwrap(), 1.0);

    // One frame: fraction of labelled pixels predicted correctly.
    let g1 = mask(2, 2, &[0, 1, IGNORE_INDEX, 3]);
    let p1 = mask(2, 2, &[0, 2, 1, 3]);
    assert_eq!(video_consistency(std::slice::from_ref(&g1), &[p1], VcDenominator::Gt).unwrap(), 2.0 / 3.0);

    // Empty gt-consistency set.
    let flip = vec![mask(1, 2, &[0, 1]), mask(1, 2, &[1, 0])];
    assert_eq!(video_consistency(&flip, &flip, VcDenominator::Gt).unwrap(), 1.0);

    assert!(matches!(video_consistency(&gts, &preds[..2], VcDenominator::Gt), Err(Error::Shape(_))));
    assert!("both".parse::<VcDenominator>().is_err());
}

#[test]
fn vc_matches_loop_oracle() {
    for seed in 0..10 {
        let gts = sticky_masks(8, 8, 8, 3, seed, 0.05);
        let preds = sticky_masks(8, 8, 8, 3, seed + 100, 0.1);
        let g: Vec<&[u8]> = gts.iter().map(|m| &m.labels[..]).collect();
        let p: Vec<&[u8]> = preds.iter().map(|m| &m.labels[..]).collect();
        for (denom, gt_den) in [(VcDenominator::Gt, true), (VcDenominator::Pred, false)] {
            let v = video_consistency(&gts, &preds, denom).unwrap();
            assert!((v - oracle::vc(&g, &p, IGNORE_INDEX, gt_den)).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn mvc_examples() {
    let gts = sticky_masks(12, 4, 4, 3, 4, 0.1);
    for w in [8, 16] {
        let v = mvc(&gts, &gts, w, VcDenominator::Gt).unwrap();
        assert_eq!(v, if w <= 12 { Some(1.0) } else { None });
    }

    let gts = sticky_masks(9, 4, 4, 3, 5, 0.05);
    let preds = sticky_masks(9, 4, 4, 3, 6, 0.05);
    let mut acc = MvcAccumulator::new(8, VcDenominator::Gt);
    acc.add_clip(&gts, &preds).unwrap();
    assert_eq!(acc.windows(), 2);
    let a = video_consistency(&gts[..8], &preds[..8], VcDenominator::Gt).unwrap();
    let b = video_consistency(&gts[1..], &preds[1..], VcDenominator::Gt).unwrap();
    assert_eq!(acc.value(), Some((a + b) / 2.0));

    let mut short = MvcAccumulator::new(16, VcDenominator::Gt);
    short.add_clip(&gts, &preds).unwrap();
    assert_eq!((short.windows(), short.skipped_clips, short.value()), (0, 1, None));
}

#[test]
fn mvc_matches_loop_oracle_on_ten_frames() {
    let gts = sticky_masks(10, 6, 6, 4, 7, 0.08);
    let preds = sticky_masks(10, 6, 6, 4, 8, 0.08);
    let g: Vec<&[u8]> = gts.iter().map(|m| &m.labels[..]).collect();
    let p: Vec<&[u8]> = preds.iter().map(|m| &m.labels[..]).collect();
    let v = mvc(&gts, &preds, 8, VcDenominator::Gt).unwrap().unwrap();
    assert!((v - oracle::mvc(&g, &p, 8, IGNORE_INDEX).unwrap()).abs() < 1e-12);
}

#[test]
fn one_corrupted_frame_per_window() {
    // 2x2 pixels, 10 frames; frame 4 (inside every 8-window) mislabels one
    // pixel, so each window keeps 3 of 4 consistent pixels.
    let g = mask(2, 2, &[0, 1, 2, 3]);
    let gts = vec![g.clone(); 10];
    let mut preds = gts.clone();
    preds[4] = mask(2, 2, &[1, 1, 2, 3]);
    let v8 = mvc(&gts, &preds, 8, VcDenominator::Gt).unwrap().unwrap();
    assert!((v8 - 0.75).abs() < 1e-12);
    assert!(v8 < 1.0);
    assert_eq!(mvc(&gts, &gts, 8, VcDenominator::Gt).unwrap(), Some(1.0));
}

proptest! {
    #[test]
    fn adding_a_frame_only_shrinks_consistency_sets(seed in any::<u64>(), t in 1usize..6) {
        let gts = sticky_masks(t + 1, 5, 5, 3, seed, 0.15);
        let preds = sticky_masks(t + 1, 5, 5, 3, seed ^ 7, 0.15);
        let short = consistency_sets(&gts[..t], &preds[..t]).unwrap();
        let long = consistency_sets(&gts, &preds).unwrap();
        for i in 0..25 {
            prop_assert!(!long.gt[i] || short.gt[i]);
            prop_assert!(!long.pred[i] || short.pred[i]);
            prop_assert!(!long.agree[i] || short.agree[i]);
        }
    }

    #[test]
    fn accumulators_merge_in_any_order(seed in any::<u64>()) {
        let clips: Vec<(Vec<SegMask>, Vec<SegMask>)> = (0..4)
            .map(|i| (sticky_masks(9 + i, 4, 4, 3, seed + i as u64, 0.1), sticky_masks(9 + i, 4, 4, 3, seed ^ (i as u64 + 50), 0.1)))
            .collect();
        let partial: Vec<(ConfusionMatrix, MvcAccumulator)> = clips
            .iter()
            .map(|(g, p)| {
                let mut cm = ConfusionMatrix::new(3);
                for (a, b) in p.iter().zip(g) {
                    cm.accumulate(a, b).unwrap();
                }
                let mut acc = MvcAccumulator::new(8, VcDenominator::Gt);
                acc.add_clip(g, p).unwrap();
                (cm, acc)
            })
            .collect();
        let merged = |order: &[usize]| {
            let mut cm = ConfusionMatrix::new(3);
            let mut acc = MvcAccumulator::new(8, VcDenominator::Gt);
            for &i in order {
                cm.merge(&partial[i].0).unwrap();
                acc.merge(&partial[i].1).unwrap();
            }
            (cm, acc.value().unwrap())
        };
        let (cm_a, v_a) = merged(&[0, 1, 2, 3]);
        let (cm_b, v_b) = merged(&[3, 1, 0, 2]);
        prop_assert_eq!(&cm_a, &cm_b);
        prop_assert_eq!(v_a.to_bits(), v_b.to_bits());
        prop_assert!((0.0..=1.0).contains(&v_a));
        let r = cm_a.iou();
        prop_assert!(r.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        // Frame order within the confusion accumulation is irrelevant too.
        let (g, p) = &clips[0];
        let mut fwd = ConfusionMatrix::new(3);
        let mut rev = ConfusionMatrix::new(3);
        for i in 0..g.len() {
            fwd.accumulate(&p[i], &g[i]).unwrap();
            rev.accumulate(&p[g.len() - 1 - i], &g[g.len() - 1 - i]).unwrap();
        }
        prop_assert_eq!(fwd, rev);
    }
}
