//! Combined soft-Dice + cross-entropy segmentation loss, composed from
//! differentiable tape operations.
//!
//! The Dice term is 1 − mean over foreground classes of
//! (2·Σ p_k g_k + 1) / (Σ p_k + Σ g_k + 1), with sums over batch and
//! pixels and p the softmax probabilities; the smoothing constant 1 keeps
//! absent classes well-defined. The cross-entropy term is the pixelwise
//! mean. With deep supervision the per-head losses are averaged
//! unweighted; the fused output is excluded (it is the sum of heads).

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::tensor::{Real, Tape, Var};

/// Soft-Dice smoothing constant (numerator and denominator).
pub const DICE_SMOOTHING: f64 = 1.0;

/// Threshold-free Dice + cross-entropy loss on one set of logits.
/// `target` must be a one-hot leaf with the same shape.
pub fn combined_loss<T: Real>(
    tape: &Tape<T>,
    logits: Var,
    target: Var,
    dice_w: f64,
    ce_w: f64,
) -> Result<Var> {
    let (b, c, h, w) = tape.shape(logits);
    if tape.shape(target) != (b, c, h, w) {
        return Err(Error::usage(format!(
            "loss target shape {:?} does not match logits {:?}",
            tape.shape(target),
            (b, c, h, w)
        )));
    }
    if c < 2 {
        return Err(Error::usage("loss needs at least 2 classes"));
    }
    let probs = tape.softmax_channels(logits);
    let intersect = tape.sum_bhw(tape.mul(probs, target));
    let mass = tape.add(tape.sum_bhw(probs), tape.sum_bhw(target));
    let per_class = tape.div(
        tape.affine(intersect, 2.0, DICE_SMOOTHING),
        tape.affine(mass, 1.0, DICE_SMOOTHING),
    );
    let foreground = tape.slice_channels(per_class, 1, c);
    let mean_dice = tape.mean_all(foreground);
    let dice_loss = tape.affine(mean_dice, -1.0, 1.0);
    let ce = tape.cross_entropy_mean(logits, target);
    Ok(tape.add(tape.affine(dice_loss, dice_w, 0.0), tape.affine(ce, ce_w, 0.0)))
}

/// Deep-supervision loss: unweighted mean of the per-head combined losses.
pub fn supervised_loss<T: Real>(
    tape: &Tape<T>,
    heads: &[Var],
    target: Var,
    dice_w: f64,
    ce_w: f64,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::usage("supervised loss needs at least one head"));
    }
    let mut acc: Option<Var> = None;
    for &head in heads {
        let l = combined_loss(tape, head, target, dice_w, ce_w)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l),
        });
    }
    Ok(tape.affine(acc.unwrap(), 1.0 / heads.len() as f64, 0.0))
}

/// One-hot encode a batch of label masks to (B, C, H, W). Out-of-range
/// classes are a usage error.
pub fn one_hot_target<T: Real>(masks: &[&LabelMask], num_classes: usize) -> Result<Array4<T>> {
    if masks.is_empty() {
        return Err(Error::usage("one-hot target needs at least one mask"));
    }
    let (h, w) = masks[0].dim();
    let mut out = Array4::zeros((masks.len(), num_classes, h, w));
    for (bi, mask) in masks.iter().enumerate() {
        if mask.dim() != (h, w) {
            return Err(Error::usage(format!(
                "mask {bi} shape {:?} differs from {:?} within one batch",
                mask.dim(),
                (h, w)
            )));
        }
        for ((y, x), &v) in mask.indexed_iter() {
            if v as usize >= num_classes {
                return Err(Error::usage(format!(
                    "mask class id {v} out of range 0..{num_classes}"
                )));
            }
            out[(bi, v as usize, y, x)] = T::one();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;

    fn tape_with_target(
        logits: Array4<f64>,
        mask: &LabelMask,
        classes: usize,
    ) -> (Tape<f64>, Var, Var) {
        let tape = Tape::new(true);
        let l = tape.leaf(logits);
        let t = tape.leaf(one_hot_target(&[mask], classes).unwrap());
        (tape, l, t)
    }

    #[test]
    fn uniform_binary_logits_give_ln2_cross_entropy() {
        let mask = LabelMask::from_shape_fn((4, 4), |(r, _)| (r % 2) as u8);
        let (tape, l, t) = tape_with_target(Array4::zeros((1, 2, 4, 4)), &mask, 2);
        let loss = combined_loss(&tape, l, t, 0.0, 1.0).unwrap();
        let v = tape.value(loss)[(0, 0, 0, 0)];
        assert!((v - 2.0f64.ln()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn strong_correct_logits_drive_loss_to_zero() {
        let mask = LabelMask::from_shape_fn((4, 4), |(r, c)| ((r + c) % 2) as u8);
        let logits = Array4::from_shape_fn((1, 2, 4, 4), |(_, ch, r, c)| {
            if mask[(r, c)] as usize == ch {
                30.0
            } else {
                -30.0
            }
        });
        let (tape, l, t) = tape_with_target(logits, &mask, 2);
        let loss = combined_loss(&tape, l, t, 1.0, 1.0).unwrap();
        assert!(tape.value(loss)[(0, 0, 0, 0)] < 1e-6);
    }

    #[test]
    fn dice_term_matches_hand_computation() {
        // 1×2 image, 2 classes, logits chosen so softmax is (0.5, 0.5) at
        // pixel 0 and (p, 1−p) with p = σ(2) at pixel 1; mask = [0, 1].
        let mask = LabelMask::from_shape_fn((1, 2), |(_, c)| c as u8);
        let mut logits = Array4::zeros((1, 2, 1, 2));
        logits[(0, 0, 0, 1)] = 1.0;
        logits[(0, 1, 0, 1)] = -1.0;
        let (tape, l, t) = tape_with_target(logits, &mask, 2);
        let loss = combined_loss(&tape, l, t, 1.0, 0.0).unwrap();
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        // Foreground class 1: intersection = prob of class 1 at pixel 1,
        // masses = (0.5 + (1−p)) + 1.
        let i = 1.0 - p;
        let dice = (2.0 * i + 1.0) / ((0.5 + (1.0 - p)) + 1.0 + 1.0);
        let expect = 1.0 - dice;
        let got = tape.value(loss)[(0, 0, 0, 0)];
        assert!((got - expect).abs() < 1e-12, "got {got}, expected {expect}");
    }

    #[test]
    fn loss_is_non_negative_on_random_inputs() {
        for seed in 0..20u64 {
            let mask = LabelMask::from_shape_fn((5, 5), |(r, c)| {
                ((r * 3 + c * 5 + seed as usize) % 3) as u8
            });
            let logits = Array4::from_shape_fn((1, 3, 5, 5), |(_, ch, r, c)| {
                (((ch * 17 + r * 5 + c * 3 + seed as usize * 7) % 13) as f64 - 6.0) / 2.0
            });
            let (tape, l, t) = tape_with_target(logits, &mask, 3);
            let loss = combined_loss(&tape, l, t, 1.0, 1.0).unwrap();
            assert!(tape.value(loss)[(0, 0, 0, 0)] >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_micro_case() {
        // 2-class 4×4 case; relative error below 1e-5 in f64.
        let mask = LabelMask::from_shape_fn((4, 4), |(r, c)| ((r * c) % 2) as u8);
        let base = Array4::from_shape_fn((1, 2, 4, 4), |(_, ch, r, c)| {
            ((ch * 7 + r * 3 + c) % 5) as f64 / 2.0 - 1.0
        });
        let eval = |logits: Array4<f64>| -> f64 {
            let (tape, l, t) = tape_with_target(logits, &mask, 2);
            let loss = combined_loss(&tape, l, t, 1.0, 1.0).unwrap();
            tape.value(loss)[(0, 0, 0, 0)]
        };
        let (tape, l, t) = tape_with_target(base.clone(), &mask, 2);
        let loss = combined_loss(&tape, l, t, 1.0, 1.0).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.get(l).unwrap();

        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 3, 1), (0, 1, 1, 1)] {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic[idx];
            let rel = (a - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "index {idx:?}: analytic {a}, fd {fd}, rel {rel}");
        }
    }

    #[test]
    fn supervised_loss_averages_heads_unweighted() {
        let mask = LabelMask::from_shape_fn((2, 2), |(r, c)| ((r + c) % 2) as u8);
        let l1 = Array4::from_shape_fn((1, 2, 2, 2), |(_, ch, r, c)| (ch + r + c) as f64 / 3.0);
        let l2 = Array4::from_shape_fn((1, 2, 2, 2), |(_, ch, r, c)| (ch * 2 + r) as f64 - c as f64);
        let tape = Tape::new(false);
        let t = tape.leaf(one_hot_target::<f64>(&[&mask], 2).unwrap());
        let a = tape.leaf(l1);
        let b = tape.leaf(l2);
        let la = tape.value(combined_loss(&tape, a, t, 1.0, 1.0).unwrap())[(0, 0, 0, 0)];
        let lb = tape.value(combined_loss(&tape, b, t, 1.0, 1.0).unwrap())[(0, 0, 0, 0)];
        let avg = tape.value(supervised_loss(&tape, &[a, b], t, 1.0, 1.0).unwrap())[(0, 0, 0, 0)];
        assert!((avg - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_rejects_out_of_range_classes() {
        let mask = Array2::from_elem((2, 2), 5u8);
        let err = one_hot_target::<f64>(&[&mask], 4).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("class id 5"));
    }

    #[test]
    fn one_hot_is_exactly_one_hot() {
        let mask = LabelMask::from_shape_fn((3, 3), |(r, c)| ((r + 2 * c) % 4) as u8);
        let t = one_hot_target::<f64>(&[&mask, &mask], 4).unwrap();
        assert_eq!(t.dim(), (2, 4, 3, 3));
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let col: Vec<f64> = (0..4).map(|c| t[(b, c, y, x)]).collect();
                    assert_eq!(col.iter().sum::<f64>(), 1.0);
                    assert_eq!(col[mask[(y, x)] as usize], 1.0);
                }
            }
        }
    }
}
