//! Training loss: cross-entropy over the soft-aggregated (K+1)-way field
//! plus per-object soft Dice, averaged over every frame except the first,
//! optionally evaluated on a seeded pixel subset (point supervision).

use alloc::format;
use alloc::vec::Vec;

use super::aggregate::soft_aggregate_probs_t;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

/// Sampled pixel subset for point supervision (all pixels at fraction 1).
pub fn sample_point_subset(hw: usize, fraction: f64, rng: &mut Rng) -> Option<Vec<usize>> {
    if fraction >= 1.0 {
        return None;
    }
    let count = ((hw as f64 * fraction) as usize).max(1);
    Some(rng.sample_indices(hw, count))
}

/// Loss terms for one frame given its aggregated field (HW, K+1) and the
/// per-pixel ground-truth channel indices. Returns (ce, dice) vars.
pub fn frame_loss_t(
    tape: &mut Tape,
    field: Var,
    gt_channels: &[usize],
    subset: Option<&[usize]>,
) -> (Var, Var) {
    let k1 = tape.value(field).cols();
    assert!(k1 >= 2);
    assert_eq!(gt_channels.len(), tape.value(field).rows());
    let (field_s, gt_s): (Var, Vec<usize>) = match subset {
        Some(idx) => (
            tape.gather_rows(field, idx),
            idx.iter().map(|&i| gt_channels[i]).collect(),
        ),
        None => (field, gt_channels.to_vec()),
    };
    let n = gt_s.len() as f64;

    // Cross entropy: -mean log p(gt).
    let picked = tape.select_per_row(field_s, &gt_s);
    let logp = tape.log(picked);
    let sum = tape.sum_all(logp);
    let ce = tape.scale(sum, -1.0 / n);

    // Soft Dice per object channel.
    let mut dice_acc: Option<Var> = None;
    let k = k1 - 1;
    for ch in 1..k1 {
        let p = tape.slice_cols(field_s, ch, 1);
        let g_bits: Vec<f64> = gt_s.iter().map(|&c| f64::from(c == ch)).collect();
        let gsum: f64 = g_bits.iter().sum();
        let g = tape.constant(Tensor::new(&[g_bits.len(), 1], g_bits));
        let pg = tape.mul(p, g);
        let inter = tape.sum_all(pg);
        let psum = tape.sum_all(p);
        let num_s = tape.scale(inter, 2.0);
        let num = tape.add_scalar(num_s, DICE_SMOOTH);
        let den = tape.add_scalar(psum, gsum + DICE_SMOOTH);
        let ratio = tape.div(num, den);
        let neg = tape.scale(ratio, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        dice_acc = Some(match dice_acc {
            None => one_minus,
            Some(acc) => tape.add(acc, one_minus),
        });
    }
    let dice = tape.scale(dice_acc.expect("k >= 1"), 1.0 / k as f64);
    (ce, dice)
}

/// Map ground-truth labels to field channel indices (0 = background,
/// 1.. = position in `ids`). Labels outside `ids` count as background.
pub fn gt_channel_indices(mask: &LabelMask, ids: &[u8]) -> Vec<usize> {
    mask.labels()
        .iter()
        .map(|&l| ids.iter().position(|&id| id == l).map_or(0, |p| p + 1))
        .collect()
}

/// Combine per-frame (ce, dice) pairs, skipping the first frame, into the
/// scalar training loss plus its parts.
pub fn train_loss_t(tape: &mut Tape, per_frame: &[(Var, Var)]) -> (Var, Var, Var) {
    assert!(!per_frame.is_empty(), "loss needs at least one scored frame");
    let inv = 1.0 / per_frame.len() as f64;
    let mut ce_acc: Option<Var> = None;
    let mut dice_acc: Option<Var> = None;
    for &(ce, dice) in per_frame {
        ce_acc = Some(match ce_acc {
            None => ce,
            Some(a) => tape.add(a, ce),
        });
        dice_acc = Some(match dice_acc {
            None => dice,
            Some(a) => tape.add(a, dice),
        });
    }
    let ce = tape.scale(ce_acc.unwrap(), inv);
    let dice = tape.scale(dice_acc.unwrap(), inv);
    let total = tape.add(ce, dice);
    (total, ce, dice)
}

/// Standalone loss over per-frame per-object logit maps (H,W): frames
/// after the first are scored; the pixel subset is seeded.
pub fn train_loss(
    pred_logits: &[Vec<Tensor>],
    gt: &[LabelMask],
    point_fraction: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    if pred_logits.len() < 2 {
        return Err(Error::Shape("loss needs at least 2 frames".into()));
    }
    if pred_logits.len() != gt.len() {
        return Err(Error::Shape("prediction/ground-truth frame counts differ".into()));
    }
    if !(0.0 < point_fraction && point_fraction <= 1.0) {
        return Err(Error::Value(format!("point fraction {point_fraction} outside (0,1]")));
    }
    let k = pred_logits[0].len();
    if k == 0 {
        return Err(Error::Shape("no objects to score".into()));
    }
    let ids: Vec<u8> = {
        let mut all = alloc::collections::BTreeSet::new();
        for m in gt {
            all.extend(m.ids_present());
        }
        all.into_iter().collect()
    };
    if ids.len() != k {
        return Err(Error::Shape(format!(
            "{k} predicted objects vs {} ground-truth ids",
            ids.len()
        )));
    }
    let mut rng = Rng::seed_from(seed);
    let mut tape = Tape::new();
    let mut frames = Vec::new();
    for (t, (logits, mask)) in pred_logits.iter().zip(gt).enumerate() {
        if t == 0 {
            continue;
        }
        let (h, w) = (mask.h, mask.w);
        let probs: Vec<Var> = logits
            .iter()
            .map(|m| {
                assert_eq!(m.dims(), &[h, w], "logit map shape");
                let v = tape.constant(m.clone().reshaped(&[h * w, 1]));
                tape.sigmoid(v)
            })
            .collect();
        let field = soft_aggregate_probs_t(&mut tape, &probs);
        let gt_ch = gt_channel_indices(mask, &ids);
        let subset = sample_point_subset(h * w, point_fraction, &mut rng);
        frames.push(frame_loss_t(&mut tape, field, &gt_ch, subset.as_deref()));
    }
    let (total, ce, dice) = train_loss_t(&mut tape, &frames);
    Ok(LossBreakdown {
        total: tape.value(total).data()[0],
        ce: tape.value(ce).data()[0],
        dice: tape.value(dice).data()[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_frames_with(mask_fn: impl Fn(usize, usize) -> u8, h: usize, w: usize) -> Vec<LabelMask> {
        let mut m = LabelMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, mask_fn(y, x));
            }
        }
        vec![m.clone(), m]
    }

    #[test]
    fn perfect_prediction_scores_near_zero() {
        let (h, w) = (6, 6);
        let gt = two_frames_with(|y, x| u8::from(y < 3 && x < 3) + 2 * u8::from(y >= 3 && x >= 3), h, w);
        let make_logits = |id: u8| -> Tensor {
            Tensor::from_fn(&[h, w], |i| {
                let (y, x) = (i / w, i % w);
                if gt[0].get(y, x) == id {
                    30.0
                } else {
                    -30.0
                }
            })
        };
        let frames = vec![
            vec![make_logits(1), make_logits(2)],
            vec![make_logits(1), make_logits(2)],
        ];
        let got = train_loss(&frames, &gt, 1.0, 0).unwrap();
        assert!(got.ce < 1e-6, "ce {}", got.ce);
        assert!(got.dice < 1e-6, "dice {}", got.dice);
    }

    #[test]
    fn uniform_prediction_gives_ln3_cross_entropy() {
        // With two objects at probability (3-sqrt(5))/2 each, the aggregated
        // field is uniform over the 3 labels, so CE = ln 3 per pixel.
        let p = (3.0 - libm::sqrt(5.0)) / 2.0;
        let logit = libm::log(p / (1.0 - p));
        let (h, w) = (4, 4);
        let gt = two_frames_with(|y, _| if y < 2 { 1 } else { 2 }, h, w);
        let map = Tensor::full(&[h, w], logit);
        let frames = vec![vec![map.clone(), map.clone()], vec![map.clone(), map]];
        let got = train_loss(&frames, &gt, 1.0, 0).unwrap();
        assert!(
            (got.ce - libm::log(3.0)).abs() < 1e-9,
            "ce {} vs ln3 {}",
            got.ce,
            libm::log(3.0)
        );
    }

    #[test]
    fn first_frame_is_excluded() {
        let (h, w) = (4, 4);
        let gt = two_frames_with(|y, _| u8::from(y < 2), h, w);
        let good = Tensor::from_fn(&[h, w], |i| if i / w < 2 { 30.0 } else { -30.0 });
        let bad = Tensor::from_fn(&[h, w], |i| if i / w < 2 { -30.0 } else { 30.0 });
        //

        // Terrible frame 0, perfect frame 1: loss is near zero.
        let frames = vec![vec![bad], vec![good]];
        let got = train_loss(&frames, &gt, 1.0, 0).unwrap();
        assert!(got.total < 1e-6, "total {}", got.total);
    }

    #[test]
    fn rejects_single_frame_and_bad_fraction() {
        let gt = vec![LabelMask::zeros(2, 2)];
        let frames = vec![vec![Tensor::zeros(&[2, 2])]];
        assert!(train_loss(&frames, &gt, 1.0, 0).is_err());
        let gt2 = two_frames_with(|_, _| 1, 2, 2);
        let frames2 = vec![vec![Tensor::zeros(&[2, 2])], vec![Tensor::zeros(&[2, 2])]];
        assert!(train_loss(&frames2, &gt2, 0.0, 0).is_err());
    }

    #[test]
    fn point_subset_mean_approximates_full_loss() {
        // Monte-Carlo: the expectation of subset losses over 200 seeded
        // resamples stays within 2% of the full-set loss.
        let (h, w) = (8, 8);
        let gt = two_frames_with(|y, x| u8::from((y + x) % 3 == 0), h, w);
        let noisy = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = (i / w, i % w);
            let base = if gt[0].get(y, x) == 1 { 1.2 } else { -0.8 };
            base + 0.6 * libm::sin((y * 7 + x * 3) as f64)
        });
        let frames = vec![vec![noisy.clone()], vec![noisy]];
        let full = train_loss(&frames, &gt, 1.0, 0).unwrap().total;
        let mut acc = 0.0;
        for s in 0..200u64 {
            acc += train_loss(&frames, &gt, 0.5, 1000 + s).unwrap().total;
        }
        let mean = acc / 200.0;
        assert!(
            (mean - full).abs() / full < 0.02,
            "subset mean {mean} vs full {full}"
        );
    }
}
