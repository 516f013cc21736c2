//! Soft aggregation of per-object probabilities into a normalized
//! (K+1)-way label distribution per pixel.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const AGG_EPS: f64 = 1e-7;

/// Aggregate per-object probability columns (HW,1) into an (HW, K+1)
/// softmax field. Column 0 is the background, whose logit comes from the
/// product of complements; object logits are the per-object log-odds.
pub fn soft_aggregate_probs_t(tape: &mut Tape, probs: &[Var]) -> Var {
    assert!(!probs.is_empty(), "soft aggregation needs at least one object");
    let mut logits = Vec::with_capacity(probs.len() + 1);
    let mut complement_product: Option<Var> = None;
    let mut obj_logits = Vec::with_capacity(probs.len());
    for &p in probs {
        let clamped = tape.clamp(p, AGG_EPS, 1.0 - AGG_EPS);
        let neg = tape.scale(clamped, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let log_p = tape.log(clamped);
        let log_1mp = tape.log(one_minus);
        obj_logits.push(tape.sub(log_p, log_1mp));
        complement_product = Some(match complement_product {
            None => one_minus,
            Some(acc) => tape.mul(acc, one_minus),
        });
    }
    let prod = complement_product.expect("nonempty");
    let neg_prod = tape.scale(prod, -1.0);
    let one_minus_prod = tape.add_scalar(neg_prod, 1.0);
    let log_bg = tape.log(prod);
    let log_fg = tape.log(one_minus_prod);
    logits.push(tape.sub(log_bg, log_fg));
    logits.extend(obj_logits);
    let stacked = tape.concat_cols(&logits);
    tape.softmax_rows(stacked)
}

/// Tensor-level soft aggregation: per-object probability maps (H,W) in
/// (0,1) to a (K+1,H,W) label-probability field that sums to 1 per pixel.
pub fn soft_aggregate(prob_maps: &[Tensor]) -> Result<Tensor> {
    if prob_maps.is_empty() {
        return Err(Error::Shape("soft aggregation of zero objects".into()));
    }
    let dims = prob_maps[0].dims().to_vec();
    if dims.len() != 2 {
        return Err(Error::Shape("probability maps must be (H,W)".into()));
    }
    for p in prob_maps {
        if p.dims() != dims {
            return Err(Error::Shape("probability maps disagree in shape".into()));
        }
        if !p.is_finite() {
            return Err(Error::Value("probability maps must be finite".into()));
        }
    }
    let (h, w) = (dims[0], dims[1]);
    let mut tape = Tape::new();
    let cols: Vec<Var> = prob_maps
        .iter()
        .map(|p| tape.constant(p.clone().reshaped(&[h * w, 1])))
        .collect();
    let field = soft_aggregate_probs_t(&mut tape, &cols);
    let k1 = prob_maps.len() + 1;
    // (HW, K+1) -> (K+1, H, W)
    let t = tape.transpose(field);
    let out = tape.reshape(t, &[k1, h, w]);
    Ok(tape.value(out).clone())
}

/// Per-pixel argmax labels of an aggregated (HW, K+1) field, mapped
/// through the object-id table (column 1 -> ids[0], ...).
pub fn field_argmax_labels(field: &Tensor, ids: &[u8]) -> Vec<u8> {
    let (hw, k1) = (field.rows(), field.cols());
    assert_eq!(k1, ids.len() + 1);
    let mut out = Vec::with_capacity(hw);
    for i in 0..hw {
        let mut best = field.at2(i, 0);
        let mut best_j = 0;
        for j in 1..k1 {
            let v = field.at2(i, j);
            if v > best {
                best = v;
                best_j = j;
            }
        }
        out.push(if best_j == 0 { 0 } else { ids[best_j - 1] });
    }
    out
}
