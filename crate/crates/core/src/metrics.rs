//! Exact Dice / Jaccard overlap metrics on integer label masks.
//!
//! Dice = 2|P∩G| / (|P|+|G|) and Jaccard = |P∩G| / |P∪G| are computed per
//! class from pixel counts. Empty-vs-empty class regions score 1.0 (both
//! masks agree there is nothing); empty-vs-nonempty scores 0.0. Set-level
//! evaluation macro-averages per-sample scores across the set.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// A 2-D integer class mask; 0 is background.
pub type LabelMask = Array2<u8>;

/// Per-pixel argmax over the class axis of (B, C, H, W) logits or
/// probabilities; ties go to the lowest class index.
pub fn argmax_masks<T: Real>(logits: &Array4<T>) -> Vec<LabelMask> {
    let (b, c, h, w) = logits.dim();
    (0..b)
        .map(|bi| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0usize;
                let mut best_v = logits[(bi, 0, y, x)];
                for ch in 1..c {
                    let v = logits[(bi, ch, y, x)];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                best as u8
            })
        })
        .collect()
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::usage(format!(
            "mask shapes differ: prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Pixel counts (|P|, |G|, |P∩G|) for one class.
fn class_counts(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> (u64, u64, u64) {
    let mut p = 0u64;
    let mut g = 0u64;
    let mut i = 0u64;
    for (&pv, &gv) in pred.iter().zip(gt.iter()) {
        let in_p = pv == class_id;
        let in_g = gv == class_id;
        p += in_p as u64;
        g += in_g as u64;
        i += (in_p && in_g) as u64;
    }
    (p, g, i)
}

fn dice_from_counts(p: u64, g: u64, i: u64) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

fn jaccard_from_counts(p: u64, g: u64, i: u64) -> f64 {
    let union = p + g - i;
    if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    }
}

/// Dice coefficient for one class: 2|P∩G| / (|P|+|G|).
pub fn dice(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g, i) = class_counts(pred, gt, class_id);
    Ok(dice_from_counts(p, g, i))
}

/// Jaccard index for one class: |P∩G| / |P∪G|.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g, i) = class_counts(pred, gt, class_id);
    Ok(jaccard_from_counts(p, g, i))
}

/// Aggregate metrics for a prediction set.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub num_classes: usize,
    pub num_samples: usize,
    /// Per-class macro averages across samples; index 0 is background.
    pub per_class_dice: Vec<f64>,
    pub per_class_jaccard: Vec<f64>,
    /// Means over foreground classes.
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    /// Total pixels per class across the set.
    pub pred_pixels: Vec<u64>,
    pub gt_pixels: Vec<u64>,
}

impl MetricsRecord {
    /// Tab-separated table: one row per foreground class per metric plus
    /// mean rows.
    pub fn render(&self, method: &str) -> String {
        let mut out = String::from("method\tmetric\tclass\tvalue\n");
        for (metric, values, mean) in [
            ("dice", &self.per_class_dice, self.mean_dice),
            ("jaccard", &self.per_class_jaccard, self.mean_jaccard),
        ] {
            for (class, value) in values.iter().enumerate().skip(1) {
                out.push_str(&format!("{method}\t{metric}\t{class}\t{value:.4}\n"));
            }
            out.push_str(&format!("{method}\t{metric}\tmean\t{mean:.4}\n"));
        }
        out
    }
}

/// Evaluate a paired prediction/ground-truth set: per-class per-sample
/// scores, macro-averaged across samples, with foreground means.
pub fn evaluate(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<MetricsRecord> {
    if preds.is_empty() {
        return Err(Error::usage("evaluation needs at least one sample"));
    }
    if preds.len() != gts.len() {
        return Err(Error::usage(format!(
            "prediction/ground-truth counts differ: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if !(2..=256).contains(&num_classes) {
        return Err(Error::usage(format!("num_classes must be in 2..=256, got {num_classes}")));
    }
    let mut per_class_dice = vec![0.0; num_classes];
    let mut per_class_jaccard = vec![0.0; num_classes];
    let mut pred_pixels = vec![0u64; num_classes];
    let mut gt_pixels = vec![0u64; num_classes];
    for (pred, gt) in preds.iter().zip(gts) {
        check_shapes(pred, gt)?;
        for (name, mask) in [("prediction", pred), ("ground truth", gt)] {
            if let Some(&v) = mask.iter().find(|&&v| v as usize >= num_classes) {
                return Err(Error::usage(format!(
                    "{name} mask contains class id {v} outside 0..{num_classes}"
                )));
            }
        }
        for class in 0..num_classes {
            let (p, g, i) = class_counts(pred, gt, class as u8);
            per_class_dice[class] += dice_from_counts(p, g, i);
            per_class_jaccard[class] += jaccard_from_counts(p, g, i);
            pred_pixels[class] += p;
            gt_pixels[class] += g;
        }
    }
    let n = preds.len() as f64;
    for class in 0..num_classes {
        per_class_dice[class] /= n;
        per_class_jaccard[class] /= n;
    }
    let fg = (num_classes - 1) as f64;
    let mean_dice = per_class_dice[1..].iter().sum::<f64>() / fg;
    let mean_jaccard = per_class_jaccard[1..].iter().sum::<f64>() / fg;
    Ok(MetricsRecord {
        num_classes,
        num_samples: preds.len(),
        per_class_dice,
        per_class_jaccard,
        mean_dice,
        mean_jaccard,
        pred_pixels,
        gt_pixels,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    use super::*;

    /// Independent oracle: explicit pixel-coordinate sets and set
    /// arithmetic, no shared code with the counting implementation.
    fn oracle(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> (f64, f64) {
        let coords = |m: &LabelMask| -> HashSet<(usize, usize)> {
            m.indexed_iter().filter(|(_, &v)| v == class_id).map(|(ix, _)| ix).collect()
        };
        let p = coords(pred);
        let g = coords(gt);
        let i = p.intersection(&g).count() as f64;
        let u = p.union(&g).count() as f64;
        let dice = if p.is_empty() && g.is_empty() { 1.0 } else { 2.0 * i / (p.len() + g.len()) as f64 };
        let jac = if u == 0.0 { 1.0 } else { i / u };
        (dice, jac)
    }

    fn random_mask(rng: &mut ChaCha8Rng, classes: u8) -> LabelMask {
        Array2::from_shape_fn((16, 16), |_| rng.random_range(0..classes))
    }

    #[test]
    fn argmax_masks_pick_highest_channel_with_first_tie() {
        let mut logits = ndarray::Array4::<f64>::zeros((1, 3, 1, 2));
        logits[(0, 2, 0, 0)] = 1.5; // clear winner: class 2
        // Pixel 1 ties across all channels → class 0 wins.
        let masks = argmax_masks(&logits);
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0][(0, 0)], 2);
        assert_eq!(masks[0][(0, 1)], 0);
    }

    #[test]
    fn identical_nonempty_masks_score_one() {
        let m = LabelMask::from_shape_fn((4, 4), |(r, _)| (r % 2) as u8);
        assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&m, &m, 1).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_regions_score_zero() {
        let mut pred = LabelMask::zeros((4, 4));
        let mut gt = LabelMask::zeros((4, 4));
        pred[(0, 0)] = 1;
        gt[(3, 3)] = 1;
        assert_eq!(dice(&pred, &gt, 1).unwrap(), 0.0);
        assert_eq!(jaccard(&pred, &gt, 1).unwrap(), 0.0);
    }

    #[test]
    fn four_pixel_square_inside_eight_pixel_rectangle() {
        // |P|=4, |G|=8, |P∩G|=4: dice = 8/12, jaccard = 4/8.
        let mut pred = LabelMask::zeros((6, 6));
        let mut gt = LabelMask::zeros((6, 6));
        for r in 1..3 {
            for c in 1..3 {
                pred[(r, c)] = 1;
            }
        }
        for r in 1..3 {
            for c in 1..5 {
                gt[(r, c)] = 1;
            }
        }
        let d = dice(&pred, &gt, 1).unwrap();
        let j = jaccard(&pred, &gt, 1).unwrap();
        assert!((d - 2.0 * 4.0 / 12.0).abs() < 1e-15);
        assert!((j - 0.5).abs() < 1e-15);
        assert!((j - d / (2.0 - d)).abs() < 1e-15);
    }

    #[test]
    fn empty_vs_empty_is_one_and_empty_vs_nonempty_is_zero() {
        let empty = LabelMask::zeros((4, 4));
        let mut nonempty = LabelMask::zeros((4, 4));
        nonempty[(2, 2)] = 1;
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &nonempty, 1).unwrap(), 0.0);
        assert_eq!(jaccard(&empty, &nonempty, 1).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_a_usage_error() {
        let a = LabelMask::zeros((4, 4));
        let b = LabelMask::zeros((4, 5));
        let err = dice(&a, &b, 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(jaccard(&a, &b, 0).is_err());
    }

    #[test]
    fn matches_brute_force_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let pred = random_mask(&mut rng, 4);
            let gt = random_mask(&mut rng, 4);
            for class in 0..4u8 {
                let (od, oj) = oracle(&pred, &gt, class);
                assert!((dice(&pred, &gt, class).unwrap() - od).abs() < 1e-12);
                assert!((jaccard(&pred, &gt, class).unwrap() - oj).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binary_identity_links_jaccard_to_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let pred = random_mask(&mut rng, 2);
            let gt = random_mask(&mut rng, 2);
            let d = dice(&pred, &gt, 1).unwrap();
            let j = jaccard(&pred, &gt, 1).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_identical_sets_scores_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let masks: Vec<LabelMask> = (0..5).map(|_| random_mask(&mut rng, 4)).collect();
        let rec = evaluate(&masks, &masks, 4).unwrap();
        assert!(rec.per_class_dice.iter().all(|&v| v == 1.0));
        assert!(rec.per_class_jaccard.iter().all(|&v| v == 1.0));
        assert_eq!(rec.mean_dice, 1.0);
        assert_eq!(rec.mean_jaccard, 1.0);
        assert_eq!(rec.num_samples, 5);
    }

    #[test]
    fn evaluate_single_pair_reproduces_pair_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pred = random_mask(&mut rng, 3);
        let gt = random_mask(&mut rng, 3);
        let rec = evaluate(
            std::slice::from_ref(&pred),
            std::slice::from_ref(&gt),
            3,
        )
        .unwrap();
        for class in 0..3u8 {
            assert_eq!(rec.per_class_dice[class as usize], dice(&pred, &gt, class).unwrap());
            assert_eq!(rec.per_class_jaccard[class as usize], jaccard(&pred, &gt, class).unwrap());
        }
    }

    #[test]
    fn evaluate_macro_averages_across_samples() {
        // Sample 1 scores dice 1.0 on class 1; sample 2 scores 0.0;
        // the macro average must be exactly 0.5.
        let mut a = LabelMask::zeros((2, 2));
        a[(0, 0)] = 1;
        let mut b = LabelMask::zeros((2, 2));
        b[(1, 1)] = 1;
        let rec = evaluate(&[a.clone(), a.clone()], &[a, b], 2).unwrap();
        assert!((rec.per_class_dice[1] - 0.5).abs() < 1e-15);
        assert!((rec.mean_dice - 0.5).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_sets() {
        let m = LabelMask::zeros((2, 2));
        assert_eq!(evaluate(&[], &[], 2).unwrap_err().exit_code(), 2);
        assert!(evaluate(std::slice::from_ref(&m), &[], 2).is_err());
        let mut bad = LabelMask::zeros((2, 2));
        bad[(0, 0)] = 7;
        let err = evaluate(std::slice::from_ref(&m), &[bad], 2).unwrap_err();
        assert!(err.to_string().contains("class id 7"));
    }

    #[test]
    fn render_emits_one_row_per_class_per_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let preds: Vec<LabelMask> = (0..3).map(|_| random_mask(&mut rng, 4)).collect();
        let gts: Vec<LabelMask> = (0..3).map(|_| random_mask(&mut rng, 4)).collect();
        let table = evaluate(&preds, &gts, 4).unwrap().render("ghost");
        let rows: Vec<&str> = table.lines().collect();
        // Header + (3 foreground classes + mean) × 2 metrics.
        assert_eq!(rows.len(), 1 + 4 * 2);
        assert_eq!(rows[0], "method\tmetric\tclass\tvalue");
        assert!(rows[1..].iter().all(|r| r.starts_with("ghost\t")));
        assert_eq!(rows.iter().filter(|r| r.contains("\tdice\t")).count(), 4);
    }

    proptest! {
        #[test]
        fn prop_symmetry_range_and_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, 3);
            let b = random_mask(&mut rng, 3);
            for class in 0..3u8 {
                let d = dice(&a, &b, class).unwrap();
                let j = jaccard(&a, &b, class).unwrap();
                prop_assert_eq!(d, dice(&b, &a, class).unwrap());
                prop_assert_eq!(j, jaccard(&b, &a, class).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert!((0.0..=1.0).contains(&j));
                prop_assert!(j <= d + 1e-15);
            }
        }

        #[test]
        fn prop_growing_intersection_never_decreases_metrics(
            p in 1usize..50,
            g in 1usize..50,
        ) {
            // Lay both regions out on a 128-cell strip; slide G so the
            // overlap grows one pixel at a time while |P| and |G| stay put.
            let build = |i: usize| {
                let mut pred = LabelMask::zeros((8, 16));
                let mut gt = LabelMask::zeros((8, 16));
                for k in 0..p {
                    pred[(k / 16, k % 16)] = 1;
                }
                for k in 0..g {
                    let cell = p - i + k;
                    gt[(cell / 16, cell % 16)] = 1;
                }
                (pred, gt)
            };
            let max_i = p.min(g);
            let mut prev_d = -1.0;
            let mut prev_j = -1.0;
            for i in 0..=max_i {
                if p - i + g > 128 {
                    continue;
                }
                let (pred, gt) = build(i);
                let d = dice(&pred, &gt, 1).unwrap();
                let j = jaccard(&pred, &gt, 1).unwrap();
                prop_assert!(d >= prev_d);
                prop_assert!(j >= prev_j);
                prev_d = d;
                prev_j = j;
            }
        }
    }
}
