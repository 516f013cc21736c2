//! Differentiable numerical primitives shared by all model modules.
//!
//! Two layers live here. The `*_t` functions build the operation on a
//! [`Tape`] and are what the model forward passes use. The plain functions
//! are the standalone contracts: they validate their inputs, run the same
//! tape composition internally and hand back tensors; oracle tests and the
//! gradient-check registry target both.
//!
//! Coordinate convention: sampling points are (x, y) in [0,1]² with
//! align-corners-false texel centers and zero padding outside the map.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One pyramid level: spatial grid of `h`×`w` tokens at the given stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelSpec {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Level layout plus per-token normalized reference points for a flattened
/// multi-scale token tensor. Token order is level-major, row-major inside
/// each level.
#[derive(Clone, Debug)]
pub struct TokenMeta {
    pub levels: Vec<LevelSpec>,
    /// (L, 2) normalized (x, y) centers, one per token.
    pub ref_points: Tensor,
}

impl TokenMeta {
    pub fn from_levels(levels: Vec<LevelSpec>) -> Self {
        let total: usize = levels.iter().map(LevelSpec::area).sum();
        let mut pts = Tensor::zeros(&[total, 2]);
        let mut i = 0;
        for lv in &levels {
            for r in 0..lv.h {
                for c in 0..lv.w {
                    pts.set2(i, 0, (c as f64 + 0.5) / lv.w as f64);
                    pts.set2(i, 1, (r as f64 + 0.5) / lv.h as f64);
                    i += 1;
                }
            }
        }
        TokenMeta { levels, ref_points: pts }
    }

    pub fn token_count(&self) -> usize {
        self.levels.iter().map(LevelSpec::area).sum()
    }

    /// Row range of level `i` inside the flattened token tensor.
    pub fn level_range(&self, i: usize) -> core::ops::Range<usize> {
        let start: usize = self.levels[..i].iter().map(LevelSpec::area).sum();
        start..start + self.levels[i].area()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ref_points.dims() != [self.token_count(), 2] {
            return Err(Error::Shape(format!(
                "ref_points {:?} do not match token count {}",
                self.ref_points.dims(),
                self.token_count()
            )));
        }
        for &p in self.ref_points.data() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Value(format!("reference point {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Flattened multi-scale feature tokens with their level layout.
#[derive(Clone, Debug)]
pub struct TokenTensor {
    pub data: Tensor,
    pub meta: TokenMeta,
}

impl TokenTensor {
    pub fn new(data: Tensor, meta: TokenMeta) -> Result<Self> {
        meta.validate()?;
        if data.dims().len() != 2 || data.rows() != meta.token_count() {
            return Err(Error::Shape(format!(
                "token data {:?} vs {} tokens",
                data.dims(),
                meta.token_count()
            )));
        }
        Ok(TokenTensor { data, meta })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Softmax along `axis` of a 1-d or 2-d tensor. Rejects non-finite input.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::Value("softmax input contains non-finite entries".into()));
    }
    let one_d = x.dims().len() == 1;
    let x2 = if one_d {
        x.clone().reshaped(&[1, x.numel()])
    } else if x.dims().len() == 2 {
        x.clone()
    } else {
        return Err(Error::Shape(format!("softmax expects 1-d or 2-d, got {:?}", x.dims())));
    };
    if axis > 1 || (one_d && axis != 0) {
        return Err(Error::Shape(format!("softmax axis {axis} out of range")));
    }
    let mut tape = Tape::new();
    let out = if one_d || axis == 1 {
        let v = tape.constant(x2);
        tape.softmax_rows(v)
    } else {
        let v = tape.constant(x2);
        let t = tape.transpose(v);
        let s = tape.softmax_rows(t);
        tape.transpose(s)
    };
    let mut result = tape.value(out).clone();
    if one_d {
        result = result.reshaped(x.dims());
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// cross attention
// ---------------------------------------------------------------------------

/// Projection weights for single-head scaled dot-product attention.
/// `wq`/`wk` map to the shared key width d; `wv` sets the output width.
#[derive(Clone, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

pub fn cross_attention_t(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    w: &AttnVars,
    d: usize,
) -> Var {
    let q = tape.matmul(query, w.wq);
    let k = tape.matmul(key, w.wk);
    let v = tape.matmul(value, w.wv);
    let scores = tape.matmul_transb(q, k);
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(d as f64));
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

fn check_attention_shapes(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    d: usize,
) -> Result<()> {
    for (t, name) in [(query, "query"), (key, "key"), (value, "value")] {
        if t.dims().len() != 2 {
            return Err(Error::Shape(format!("{name} must be 2-d, got {:?}", t.dims())));
        }
    }
    if key.rows() != value.rows() {
        return Err(Error::Shape(format!(
            "key rows {} != value rows {}",
            key.rows(),
            value.rows()
        )));
    }
    if wq.rows() != query.cols() || wk.rows() != key.cols() || wv.rows() != value.cols() {
        return Err(Error::Shape("projection input widths do not match tokens".into()));
    }
    if wq.cols() != d || wk.cols() != d {
        return Err(Error::Shape(format!(
            "projected key width {} / {} != d = {d}",
            wq.cols(),
            wk.cols()
        )));
    }
    Ok(())
}

/// Single-head cross attention:
/// out[i] = Σ_j softmax_j((Wq·q_i)·(Wk·k_j)/√d) · (Wv·v_j).
pub fn cross_attention(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    d: usize,
) -> Result<Tensor> {
    check_attention_shapes(query, key, value, wq, wk, wv, d)?;
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let v = tape.constant(value.clone());
    let w = AttnVars {
        wq: tape.constant(wq.clone()),
        wk: tape.constant(wk.clone()),
        wv: tape.constant(wv.clone()),
    };
    let out = cross_attention_t(&mut tape, q, k, v, &w, d);
    Ok(tape.value(out).clone())
}

/// Additive logit mask: 0 where admissible, -inf where excluded.
pub fn mask_bias_row(mask: &[u8]) -> Tensor {
    Tensor::new(
        &[1, mask.len()],
        mask.iter()
            .map(|&m| if m != 0 { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
    )
}

/// Masked single-head cross attention over flattened tokens. Logits at
/// positions with mask = 0 are forced to -inf before the softmax; an
/// all-zero mask falls back to unmasked attention over all tokens.
pub fn masked_cross_attention_t(
    tape: &mut Tape,
    query: Var,
    feat: Var,
    mask: &[u8],
    w: &AttnVars,
    d: usize,
) -> Var {
    let q = tape.matmul(query, w.wq);
    let k = tape.matmul(feat, w.wk);
    let v = tape.matmul(feat, w.wv);
    let scores = tape.matmul_transb(q, k);
    let mut scaled = tape.scale(scores, 1.0 / libm::sqrt(d as f64));
    if mask.iter().any(|&m| m != 0) {
        let bias = tape.constant(mask_bias_row(mask));
        scaled = tape.add_row_broadcast(scaled, bias);
    }
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

pub fn masked_cross_attention(
    query: &Tensor,
    feat: &TokenTensor,
    mask: &[u8],
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    d: usize,
) -> Result<Tensor> {
    if mask.len() != feat.meta.token_count() {
        return Err(Error::Shape(format!(
            "mask length {} != token count {}",
            mask.len(),
            feat.meta.token_count()
        )));
    }
    check_attention_shapes(query, &feat.data, &feat.data, wq, wk, wv, d)?;
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let f = tape.constant(feat.data.clone());
    let w = AttnVars {
        wq: tape.constant(wq.clone()),
        wk: tape.constant(wk.clone()),
        wv: tape.constant(wv.clone()),
    };
    let out = masked_cross_attention_t(&mut tape, q, f, mask, &w, d);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

/// Bilinear sampling of a (C,H,W) map at (P,2) normalized points.
pub fn bilinear_sample(feat: &Tensor, points: &Tensor) -> Result<Tensor> {
    if feat.dims().len() != 3 {
        return Err(Error::Shape(format!("feat must be (C,H,W), got {:?}", feat.dims())));
    }
    if points.dims().len() != 2 || points.cols() != 2 {
        return Err(Error::Shape(format!("points must be (P,2), got {:?}", points.dims())));
    }
    if !points.is_finite() {
        return Err(Error::Value("sample points must be finite".into()));
    }
    let mut tape = Tape::new();
    let f = tape.constant(feat.clone());
    let p = tape.constant(points.clone());
    let out = tape.bilinear_sample(f, p);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// deformable attention
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct DeformConfig {
    pub heads: usize,
    pub points_per_level: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig { heads: 4, points_per_level: 4 }
    }
}

/// Tape-resident parameters of the deformable kernel.
#[derive(Clone, Debug)]
pub struct DeformVars {
    /// (C, heads·levels·points·2)
    pub w_offset: Var,
    /// (1, heads·levels·points·2)
    pub b_offset: Var,
    /// (C, heads·levels·points)
    pub w_weight: Var,
    /// (1, heads·levels·points)
    pub b_weight: Var,
    /// (C, C)
    pub w_val: Var,
    /// (C, C)
    pub w_out: Var,
}

/// Multi-scale deformable attention.
///
/// Per query token, head and level: sampling offsets and attention logits
/// are linear in the query token; locations are ref_point + Δp scaled by
/// the level size; weights are a per-head softmax over (levels × points);
/// head results are concatenated and projected with `w_out`. The sampled
/// source is `value_levels`, one (C,h,w) map per level of `meta`.
pub fn deformable_attention_t(
    tape: &mut Tape,
    query: Var,
    meta: &TokenMeta,
    value_levels: &[Var],
    cfg: DeformConfig,
    p: &DeformVars,
) -> Var {
    let n_levels = meta.levels.len();
    assert!(n_levels > 0, "deformable attention needs at least one level");
    assert_eq!(value_levels.len(), n_levels, "value pyramid level count");
    let tokens = meta.token_count();
    assert_eq!(tape.value(query).rows(), tokens, "query token count");
    let c = tape.value(query).cols();
    let heads = cfg.heads;
    let pts = cfg.points_per_level;
    assert_eq!(c % heads, 0, "channels not divisible by heads");
    let ch = c / heads;

    let off_lin = tape.matmul(query, p.w_offset);
    let offsets = tape.add_row_broadcast(off_lin, p.b_offset);
    let wlog_lin = tape.matmul(query, p.w_weight);
    let wlogits = tape.add_row_broadcast(wlog_lin, p.b_weight);

    let refs = tape.constant(meta.ref_points.clone());
    let refs_rep = tape.repeat_rows(refs, pts);

    // Per-level value maps projected by w_val, shared across heads.
    let proj_levels: Vec<Var> = value_levels
        .iter()
        .enumerate()
        .map(|(l, &map)| {
            let lv = &meta.levels[l];
            let flat = tape.reshape(map, &[c, lv.area()]);
            let tokens_lv = tape.transpose(flat);
            let proj = tape.matmul(tokens_lv, p.w_val);
            let back = tape.transpose(proj);
            tape.reshape(back, &[c, lv.h, lv.w])
        })
        .collect();

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let logits_h = tape.slice_cols(wlogits, h * n_levels * pts, n_levels * pts);
        let weights_h = tape.softmax_rows(logits_h);
        let mut acc: Option<Var> = None;
        for (l, lv) in meta.levels.iter().enumerate() {
            // This head's channel slab of the projected level map.
            let flat = tape.reshape(proj_levels[l], &[c, lv.area()]);
            let head_rows = tape.slice_rows(flat, h * ch, ch);
            let v_map = tape.reshape(head_rows, &[ch, lv.h, lv.w]);

            // Sampling locations: ref + Δp / level size.
            let off_hl = tape.slice_cols(offsets, ((h * n_levels + l) * pts) * 2, pts * 2);
            let off_pts = tape.reshape(off_hl, &[tokens * pts, 2]);
            let inv = tape.constant(Tensor::new(
                &[1, 2],
                vec![1.0 / lv.w as f64, 1.0 / lv.h as f64],
            ));
            let off_scaled = tape.mul_row_broadcast(off_pts, inv);
            let locs = tape.add(refs_rep, off_scaled);

            let samples = tape.bilinear_sample(v_map, locs);

            let w_hl = tape.slice_cols(weights_h, l * pts, pts);
            let w_col = tape.reshape(w_hl, &[tokens * pts, 1]);
            let weighted = tape.mul_col_broadcast(samples, w_col);
            let summed = tape.sum_row_groups(weighted, pts);
            acc = Some(match acc {
                Some(a) => tape.add(a, summed),
                None => summed,
            });
        }
        head_outputs.push(acc.expect("at least one level"));
    }
    let merged = tape.concat_cols(&head_outputs);
    tape.matmul(merged, p.w_out)
}

/// Tensor-level deformable kernel parameters.
#[derive(Clone, Debug)]
pub struct DeformParams {
    pub w_offset: Tensor,
    pub b_offset: Tensor,
    pub w_weight: Tensor,
    pub b_weight: Tensor,
    pub w_val: Tensor,
    pub w_out: Tensor,
}

impl DeformParams {
    pub fn inject(&self, tape: &mut Tape, trainable: bool) -> DeformVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DeformVars {
            w_offset: put(&self.w_offset),
            b_offset: put(&self.b_offset),
            w_weight: put(&self.w_weight),
            b_weight: put(&self.b_weight),
            w_val: put(&self.w_val),
            w_out: put(&self.w_out),
        }
    }
}

/// Standalone deformable attention where the query's own tokens, folded
/// back to per-level maps, are the sampling source.
pub fn deformable_attention(
    query: &TokenTensor,
    cfg: DeformConfig,
    params: &DeformParams,
) -> Result<TokenTensor> {
    if query.meta.levels.is_empty() {
        return Err(Error::Shape("deformable attention with zero levels".into()));
    }
    query.meta.validate()?;
    let c = query.channels();
    let hlp = cfg.heads * query.meta.levels.len() * cfg.points_per_level;
    if params.w_offset.dims() != [c, hlp * 2]
        || params.w_weight.dims() != [c, hlp]
        || params.w_val.dims() != [c, c]
        || params.w_out.dims() != [c, c]
    {
        return Err(Error::Shape("deformable parameter shapes inconsistent".into()));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query.data.clone());
    let vars = params.inject(&mut tape, false);
    let value_levels = fold_tokens_to_levels(&mut tape, q, &query.meta);
    let out = deformable_attention_t(&mut tape, q, &query.meta, &value_levels, cfg, &vars);
    TokenTensor::new(tape.value(out).clone(), query.meta.clone())
}

/// Fold flattened (L,C) tokens into per-level (C,h,w) maps.
pub fn fold_tokens_to_levels(tape: &mut Tape, tokens: Var, meta: &TokenMeta) -> Vec<Var> {
    let c = tape.value(tokens).cols();
    (0..meta.levels.len())
        .map(|l| {
            let lr = meta.level_range(l);
            let rows = tape.slice_rows(tokens, lr.start, lr.len());
            let t = tape.transpose(rows);
            let lv = &meta.levels[l];
            tape.reshape(t, &[c, lv.h, lv.w])
        })
        .collect()
}

/// Unfold per-level (C,h,w) maps back into flattened (L,C) tokens.
pub fn unfold_levels_to_tokens(tape: &mut Tape, levels: &[Var]) -> Var {
    let parts: Vec<Var> = levels
        .iter()
        .map(|&map| {
            let dims = tape.value(map).dims().to_vec();
            let flat = tape.reshape(map, &[dims[0], dims[1] * dims[2]]);
            tape.transpose(flat)
        })
        .collect();
    let mut tape_ref = parts;
    // concat_rows needs a slice; keep the temporary explicit.
    let out = tape.concat_rows(&tape_ref);
    tape_ref.clear();
    out
}

// ---------------------------------------------------------------------------
// convolutional feed-forward
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvFfnVars {
    /// (C, Ce)
    pub w_expand: Var,
    /// (1, Ce)
    pub b_expand: Var,
    /// (Ce, 1, 3, 3) depthwise
    pub w_dw: Var,
    /// (Ce,)
    pub b_dw: Var,
    /// (Ce, C)
    pub w_project: Var,
    /// (1, C)
    pub b_project: Var,
}

/// Pointwise expand, per-level 3×3 depthwise convolution, GELU, pointwise
/// project. Token count and level layout are preserved.
pub fn conv_ffn_t(tape: &mut Tape, x: Var, meta: &TokenMeta, p: &ConvFfnVars) -> Var {
    let lin = tape.matmul(x, p.w_expand);
    let expanded = tape.add_row_broadcast(lin, p.b_expand);
    let ce = tape.value(expanded).cols();
    let mut level_tokens = Vec::with_capacity(meta.levels.len());
    for (l, lv) in meta.levels.iter().enumerate() {
        let lr = meta.level_range(l);
        let rows = tape.slice_rows(expanded, lr.start, lr.len());
        let t = tape.transpose(rows);
        let map = tape.reshape(t, &[ce, lv.h, lv.w]);
        let conv = tape.conv2d(map, p.w_dw, Some(p.b_dw), 1, 1, ce);
        let flat = tape.reshape(conv, &[ce, lv.area()]);
        level_tokens.push(tape.transpose(flat));
    }
    let folded = tape.concat_rows(&level_tokens);
    let act = tape.gelu(folded);
    let proj = tape.matmul(act, p.w_project);
    tape.add_row_broadcast(proj, p.b_project)
}

#[derive(Clone, Debug)]
pub struct ConvFfnParams {
    pub w_expand: Tensor,
    pub b_expand: Tensor,
    pub w_dw: Tensor,
    pub b_dw: Tensor,
    pub w_project: Tensor,
    pub b_project: Tensor,
}

impl ConvFfnParams {
    pub fn inject(&self, tape: &mut Tape, trainable: bool) -> ConvFfnVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ConvFfnVars {
            w_expand: put(&self.w_expand),
            b_expand: put(&self.b_expand),
            w_dw: put(&self.w_dw),
            b_dw: put(&self.b_dw),
            w_project: put(&self.w_project),
            b_project: put(&self.b_project),
        }
    }
}

pub fn conv_ffn(x: &TokenTensor, params: &ConvFfnParams) -> Result<TokenTensor> {
    x.meta.validate()?;
    let c = x.channels();
    if params.w_expand.rows() != c || params.w_project.cols() != c {
        return Err(Error::Shape("conv_ffn projection widths".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.data.clone());
    let vars = params.inject(&mut tape, false);
    let out = conv_ffn_t(&mut tape, v, &x.meta, &vars);
    TokenTensor::new(tape.value(out).clone(), x.meta.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn eye(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let out = softmax(&Tensor::new(&[3], vec![0.0, 0.0, 0.0]), 0).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // [ln1, ln2, ln3] -> [1/6, 2/6, 3/6] by the closed form exp/sum.
        let x = Tensor::new(&[3], vec![0.0, libm::log(2.0), libm::log(3.0)]);
        let out = softmax(&x, 0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_shift_invariant_and_positive() {
        let mut rng = Rng::seed_from(2);
        let x = Tensor::randn(&[4, 7], 2.0, &mut rng);
        let shifted = x.map(|v| v + 100.0);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for i in 0..4 {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a.row(i).iter().all(|&v| v > 0.0));
        }
        // Axis 0 normalizes columns.
        let c = softmax(&x, 0).unwrap();
        for j in 0..7 {
            let s: f64 = (0..4).map(|i| c.at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new(&[2], vec![1.0, f64::NAN]);
        assert!(matches!(softmax(&x, 0), Err(Error::Value(_))));
        let y = Tensor::new(&[2], vec![1.0, f64::INFINITY]);
        assert!(softmax(&y, 0).is_err());
    }

    #[test]
    fn cross_attention_single_key_ignores_scores() {
        let mut rng = Rng::seed_from(3);
        let q = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let (wq, wk, wv) = (eye(4), eye(4), eye(4));
        let out = cross_attention(&q, &k, &v, &wq, &wk, &wv, 4).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!((out.at2(i, j) - v.at2(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_attention_rejects_mismatched_shapes() {
        let q = Tensor::zeros(&[2, 4]);
        let k = Tensor::zeros(&[3, 4]);
        let v = Tensor::zeros(&[2, 4]); // rows disagree with key
        let w = eye(4);
        assert!(cross_attention(&q, &k, &v, &w, &w, &w, 4).is_err());
        let wq_bad = Tensor::zeros(&[5, 4]);
        let v2 = Tensor::zeros(&[3, 4]);
        assert!(cross_attention(&q, &k, &v2, &wq_bad, &w, &w, 4).is_err());
    }

    #[test]
    fn masked_attention_all_ones_equals_unmasked() {
        let mut rng = Rng::seed_from(4);
        let meta = TokenMeta::from_levels(vec![LevelSpec { stride: 16, h: 2, w: 3 }]);
        let feat = TokenTensor::new(Tensor::randn(&[6, 4], 1.0, &mut rng), meta).unwrap();
        let q = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let (wq, wk, wv) = (
            Tensor::randn(&[4, 4], 0.5, &mut rng),
            Tensor::randn(&[4, 4], 0.5, &mut rng),
            Tensor::randn(&[4, 4], 0.5, &mut rng),
        );
        let masked = masked_cross_attention(&q, &feat, &[1; 6], &wq, &wk, &wv, 4).unwrap();
        let plain = cross_attention(&q, &feat.data, &feat.data, &wq, &wk, &wv, 4).unwrap();
        assert!(masked.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn masked_attention_single_admissible_key() {
        let mut rng = Rng::seed_from(5);
        let meta = TokenMeta::from_levels(vec![LevelSpec { stride: 16, h: 2, w: 2 }]);
        let feat = TokenTensor::new(Tensor::randn(&[4, 3], 1.0, &mut rng), meta).unwrap();
        let q = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let (wq, wk) = (eye(3), eye(3));
        let wv = Tensor::randn(&[3, 3], 0.7, &mut rng);
        let mask = [0u8, 0, 1, 0];
        let out = masked_cross_attention(&q, &feat, &mask, &wq, &wk, &wv, 3).unwrap();
        let vrow = Tensor::new(&[1, 3], feat.data.row(2).to_vec()).matmul(&wv);
        for i in 0..3 {
            for j in 0..3 {
                assert!((out.at2(i, j) - vrow.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_attention_all_zero_mask_falls_back() {
        let mut rng = Rng::seed_from(6);
        let meta = TokenMeta::from_levels(vec![LevelSpec { stride: 16, h: 2, w: 2 }]);
        let feat = TokenTensor::new(Tensor::randn(&[4, 3], 1.0, &mut rng), meta).unwrap();
        let q = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3], 0.5, &mut rng);
        let masked = masked_cross_attention(&q, &feat, &[0; 4], &w, &w, &w, 3).unwrap();
        let plain = cross_attention(&q, &feat.data, &feat.data, &w, &w, &w, 3).unwrap();
        assert!(masked.max_abs_diff(&plain) < 1e-15);
        assert!(masked.is_finite());
    }

    #[test]
    fn bilinear_texel_center_and_midpoint() {
        let feat = Tensor::from_fn(&[1, 2, 3], |i| i as f64 * 10.0);
        // Texel (x=1, y=0) center: ((1+0.5)/3, (0+0.5)/2).
        let p = Tensor::new(&[1, 2], vec![1.5 / 3.0, 0.5 / 2.0]);
        let out = bilinear_sample(&feat, &p).unwrap();
        assert!((out.at2(0, 0) - 10.0).abs() < 1e-12);
        // Midpoint of texels (0,0) and (1,0): average.
        let p = Tensor::new(&[1, 2], vec![1.0 / 3.0, 0.25]);
        let out = bilinear_sample(&feat, &p).unwrap();
        assert!((out.at2(0, 0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_rejects_bad_shapes() {
        let feat = Tensor::zeros(&[2, 2]);
        let p = Tensor::zeros(&[1, 2]);
        assert!(bilinear_sample(&feat, &p).is_err());
        let feat = Tensor::zeros(&[1, 2, 2]);
        let bad = Tensor::new(&[1, 2], vec![0.5, f64::NAN]);
        assert!(bilinear_sample(&feat, &bad).is_err());
    }

    fn small_meta() -> TokenMeta {
        TokenMeta::from_levels(vec![
            LevelSpec { stride: 8, h: 2, w: 2 },
            LevelSpec { stride: 16, h: 1, w: 2 },
        ])
    }

    fn zero_deform_params(c: usize, levels: usize, cfg: DeformConfig) -> DeformParams {
        let hlp = cfg.heads * levels * cfg.points_per_level;
        DeformParams {
            w_offset: Tensor::zeros(&[c, hlp * 2]),
            b_offset: Tensor::zeros(&[1, hlp * 2]),
            w_weight: Tensor::zeros(&[c, hlp]),
            b_weight: Tensor::zeros(&[1, hlp]),
            w_val: eye(c),
            w_out: eye(c),
        }
    }

    #[test]
    fn deformable_constant_field_fixed_point() {
        // Single level: every reference point is a texel center, so a
        // constant field is an exact fixed point under zero offsets,
        // uniform weights and identity projections.
        let meta = TokenMeta::from_levels(vec![LevelSpec { stride: 8, h: 3, w: 4 }]);
        let c = 4;
        let cfg = DeformConfig { heads: 2, points_per_level: 2 };
        let params = zero_deform_params(c, meta.levels.len(), cfg);
        let data = Tensor::from_fn(&[meta.token_count(), c], |i| (i % c) as f64 + 1.0);
        let q = TokenTensor::new(data.clone(), meta).unwrap();
        let out = deformable_attention(&q, cfg, &params).unwrap();
        for i in 0..out.data.rows() {
            for j in 0..c {
                assert!((out.data.at2(i, j) - data.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deformable_constant_field_interior_tokens_multi_level() {
        // With several levels, zero padding attenuates border tokens that
        // sample a coarser level outside its texel-center hull; tokens whose
        // reference points lie inside every hull still keep the constant.
        let meta = small_meta();
        let c = 4;
        let cfg = DeformConfig { heads: 2, points_per_level: 2 };
        let params = zero_deform_params(c, meta.levels.len(), cfg);
        let data = Tensor::from_fn(&[meta.token_count(), c], |i| (i % c) as f64 + 1.0);
        let q = TokenTensor::new(data.clone(), meta.clone()).unwrap();
        let out = deformable_attention(&q, cfg, &params).unwrap();
        for i in 0..out.data.rows() {
            let (px, py) = (meta.ref_points.at2(i, 0), meta.ref_points.at2(i, 1));
            let interior = meta.levels.iter().all(|lv| {
                let (hx, hy) = (0.5 / lv.w as f64, 0.5 / lv.h as f64);
                px >= hx && px <= 1.0 - hx && py >= hy && py <= 1.0 - hy
            });
            if !interior {
                continue;
            }
            for j in 0..c {
                assert!((out.data.at2(i, j) - data.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deformable_zero_levels_rejected() {
        let meta = TokenMeta { levels: vec![], ref_points: Tensor::zeros(&[0, 2]) };
        let q = TokenTensor { data: Tensor::zeros(&[0, 4]), meta };
        let cfg = DeformConfig::default();
        let params = zero_deform_params(4, 1, cfg);
        assert!(deformable_attention(&q, cfg, &params).is_err());
    }

    #[test]
    fn fold_unfold_round_trip() {
        let meta = small_meta();
        let mut rng = Rng::seed_from(7);
        let tokens = Tensor::randn(&[meta.token_count(), 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(tokens.clone());
        let levels = fold_tokens_to_levels(&mut tape, v, &meta);
        let back = unfold_levels_to_tokens(&mut tape, &levels);
        assert!(tape.value(back).max_abs_diff(&tokens) == 0.0);
    }

    #[test]
    fn conv_ffn_zero_params_zero_output() {
        let meta = small_meta();
        let c = 4;
        let ce = 8;
        let params = ConvFfnParams {
            w_expand: Tensor::zeros(&[c, ce]),
            b_expand: Tensor::zeros(&[1, ce]),
            w_dw: Tensor::zeros(&[ce, 1, 3, 3]),
            b_dw: Tensor::zeros(&[ce]),
            w_project: Tensor::zeros(&[ce, c]),
            b_project: Tensor::zeros(&[1, c]),
        };
        let mut rng = Rng::seed_from(8);
        let x =
            TokenTensor::new(Tensor::randn(&[meta.token_count(), c], 1.0, &mut rng), meta).unwrap();
        let out = conv_ffn(&x, &params).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ffn_impulse_kernel_collapses_to_pointwise() {
        let meta = small_meta();
        let (c, ce) = (3, 5);
        let mut rng = Rng::seed_from(9);
        let w_expand = Tensor::randn(&[c, ce], 0.7, &mut rng);
        let b_expand = Tensor::randn(&[1, ce], 0.3, &mut rng);
        let w_project = Tensor::randn(&[ce, c], 0.7, &mut rng);
        let b_project = Tensor::randn(&[1, c], 0.3, &mut rng);
        let mut w_dw = Tensor::zeros(&[ce, 1, 3, 3]);
        for ch in 0..ce {
            w_dw.data_mut()[ch * 9 + 4] = 1.0; // center-only impulse
        }
        let params = ConvFfnParams {
            w_expand: w_expand.clone(),
            b_expand: b_expand.clone(),
            w_dw,
            b_dw: Tensor::zeros(&[ce]),
            w_project: w_project.clone(),
            b_project: b_project.clone(),
        };
        let x =
            TokenTensor::new(Tensor::randn(&[meta.token_count(), c], 1.0, &mut rng), meta).unwrap();
        let got = conv_ffn(&x, &params).unwrap();

        // Plain two-layer pointwise FFN.
        let mut tape = Tape::new();
        let v = tape.constant(x.data.clone());
        let we = tape.constant(w_expand);
        let be = tape.constant(b_expand);
        let wp = tape.constant(w_project);
        let bp = tape.constant(b_project);
        let h1 = tape.matmul(v, we);
        let h1b = tape.add_row_broadcast(h1, be);
        let act = tape.gelu(h1b);
        let h2 = tape.matmul(act, wp);
        let out = tape.add_row_broadcast(h2, bp);
        assert!(got.data.max_abs_diff(tape.value(out)) < 1e-12);
    }

    #[test]
    fn token_meta_validates_bounds() {
        let meta = TokenMeta::from_levels(vec![LevelSpec { stride: 4, h: 3, w: 5 }]);
        assert_eq!(meta.token_count(), 15);
        meta.validate().unwrap();
        let mut bad = meta.clone();
        bad.ref_points.set2(0, 0, 1.5);
        assert!(bad.validate().is_err());
    }
}
