//! Discriminative query transformer: masked cross-attention blocks that
//! refine per-object queries, plus the discriminative selection and scaled
//! correspondence propagation applied in each block.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::{cross_attention_t, AttnVars};
use crate::params::{linear_init, Binder, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-object set of N object queries of width C.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub q: Tensor,
    pub object_id: u8,
}

impl QuerySet {
    pub fn new(q: Tensor, object_id: u8) -> Result<Self> {
        if q.dims().len() != 2 {
            return Err(Error::Shape(format!("queries must be (N,C), got {:?}", q.dims())));
        }
        if !q.is_finite() {
            return Err(Error::Value("query rows must be finite".into()));
        }
        Ok(QuerySet { q, object_id })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }
}

pub fn init_query_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    let c = cfg.channels;
    store.insert("query.init", Tensor::randn(&[cfg.num_queries, c], 1.0, rng), true);
    for b in 0..cfg.query_depth {
        let p = |s: &str| -> String { format!("query.block{b}.{s}") };
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(&p(&format!("{ln}.gamma")), Tensor::full(&[1, c], 1.0), true);
            store.insert(&p(&format!("{ln}.beta")), Tensor::zeros(&[1, c]), true);
        }
        for attn in ["mca", "self"] {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(&p(&format!("{attn}.{w}")), linear_init(c, c, rng), true);
            }
        }
        store.insert(&p("ffn.w1"), linear_init(c, 4 * c, rng), true);
        store.insert(&p("ffn.b1"), Tensor::zeros(&[1, 4 * c]), true);
        store.insert(&p("ffn.w2"), linear_init(4 * c, c, rng), true);
        store.insert(&p("ffn.b2"), Tensor::zeros(&[1, c]), true);
        // Propagation starts as identity-plus-skip: alpha and Wout at zero.
        store.insert(&p("alpha"), Tensor::zeros(&[1, c]), true);
        store.insert(&p("wout"), Tensor::zeros(&[c, c]), true);
    }
}

pub struct QueryBlockVars {
    pub ln1: (Var, Var),
    pub mca: AttnVars,
    pub mca_wo: Var,
    pub ln2: (Var, Var),
    pub selfattn: AttnVars,
    pub self_wo: Var,
    pub ln3: (Var, Var),
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub alpha: Var,
    pub wout: Var,
}

impl QueryBlockVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, binder: &mut Binder, b: usize) -> Self {
        let p = |s: &str| -> String { format!("query.block{b}.{s}") };
        let ln = |tape: &mut Tape, binder: &mut Binder, name: &str| -> (Var, Var) {
            (
                binder.bind(tape, store, &p(&format!("{name}.gamma"))),
                binder.bind(tape, store, &p(&format!("{name}.beta"))),
            )
        };
        let attn = |tape: &mut Tape, binder: &mut Binder, name: &str| -> AttnVars {
            AttnVars {
                wq: binder.bind(tape, store, &p(&format!("{name}.wq"))),
                wk: binder.bind(tape, store, &p(&format!("{name}.wk"))),
                wv: binder.bind(tape, store, &p(&format!("{name}.wv"))),
            }
        };
        QueryBlockVars {
            ln1: ln(tape, binder, "ln1"),
            mca: attn(tape, binder, "mca"),
            mca_wo: binder.bind(tape, store, &p("mca.wo")),
            ln2: ln(tape, binder, "ln2"),
            selfattn: attn(tape, binder, "self"),
            self_wo: binder.bind(tape, store, &p("self.wo")),
            ln3: ln(tape, binder, "ln3"),
            ffn_w1: binder.bind(tape, store, &p("ffn.w1")),
            ffn_b1: binder.bind(tape, store, &p("ffn.b1")),
            ffn_w2: binder.bind(tape, store, &p("ffn.w2")),
            ffn_b2: binder.bind(tape, store, &p("ffn.b2")),
            alpha: binder.bind(tape, store, &p("alpha")),
            wout: binder.bind(tape, store, &p("wout")),
        }
    }
}

/// Argmax row per query of the masked similarity S = feat·qᵀ, restricted to
/// positions where the mask is 1; ties go to the lowest index. `None` when
/// the mask has no active position (absent target).
pub fn discriminative_select_indices(
    feat: &Tensor,
    q: &Tensor,
    mask: &[u8],
) -> Result<Option<Vec<usize>>> {
    if mask.len() != feat.rows() {
        return Err(Error::Shape(format!(
            "mask length {} != token count {}",
            mask.len(),
            feat.rows()
        )));
    }
    if q.cols() != feat.cols() {
        return Err(Error::Shape("query/feature widths differ".into()));
    }
    if !mask.iter().any(|&m| m != 0) {
        return Ok(None);
    }
    let mut indices = Vec::with_capacity(q.rows());
    for n in 0..q.rows() {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = usize::MAX;
        for i in 0..feat.rows() {
            if mask[i] == 0 {
                continue;
            }
            let mut s = 0.0;
            for col in 0..feat.cols() {
                s += feat.at2(i, col) * q.at2(n, col);
            }
            if s > best {
                best = s;
                best_i = i;
            }
        }
        indices.push(best_i);
    }
    Ok(Some(indices))
}

/// The salient-feature selection: rows of `feat` at the masked argmax of
/// the similarity, or the queries themselves when the mask is empty.
pub fn discriminative_select(feat: &Tensor, q: &Tensor, mask: &[u8]) -> Result<Tensor> {
    match discriminative_select_indices(feat, q, mask)? {
        None => Ok(q.clone()),
        Some(idx) => {
            let mut out = Tensor::zeros(&[q.rows(), feat.cols()]);
            for (n, &i) in idx.iter().enumerate() {
                for col in 0..feat.cols() {
                    out.set2(n, col, feat.at2(i, col));
                }
            }
            Ok(out)
        }
    }
}

/// Q_out = (α ⊙ A/‖A‖₂ + Q_s)·W_out + Q_in with A = Q ⊙ Q_s and the norm
/// taken per query row (zero rows normalize to zero).
pub fn propagate_query_t(
    tape: &mut Tape,
    q_in: Var,
    q_refined: Var,
    q_s: Var,
    alpha: Var,
    wout: Var,
) -> Var {
    let a = tape.mul(q_refined, q_s);
    let a_hat = tape.normalize_rows(a);
    let scaled = tape.mul_row_broadcast(a_hat, alpha);
    let mixed = tape.add(scaled, q_s);
    let projected = tape.matmul(mixed, wout);
    tape.add(projected, q_in)
}

fn sublayer_ln(tape: &mut Tape, x: Var, ln: (Var, Var)) -> Var {
    tape.layer_norm_rows(x, ln.0, ln.1, 1e-6)
}

/// One discriminative query transformer block: masked cross attention over
/// the tokens, self attention among the queries, FFN (all pre-norm with
/// residuals), then discriminative selection + propagation. Disabling the
/// discriminative component passes the refined queries through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn query_block_t(
    tape: &mut Tape,
    feat: Var,
    feat_pos: Var,
    q_in: Var,
    mask: &[u8],
    vars: &QueryBlockVars,
    channels: usize,
    disable_discriminative: bool,
) -> Var {
    // Masked cross attention (keys carry the positional encoding).
    let xn = sublayer_ln(tape, q_in, vars.ln1);
    let key_src = tape.add(feat, feat_pos);
    let attn = masked_cross_attention_kv_t(tape, xn, key_src, feat, mask, &vars.mca, channels);
    let attn_proj = tape.matmul(attn, vars.mca_wo);
    let x1 = tape.add(q_in, attn_proj);

    // Self attention among the N queries.
    let xn2 = sublayer_ln(tape, x1, vars.ln2);
    let sa = cross_attention_t(tape, xn2, xn2, xn2, &vars.selfattn, channels);
    let sa_proj = tape.matmul(sa, vars.self_wo);
    let x2 = tape.add(x1, sa_proj);

    // Feed-forward.
    let xn3 = sublayer_ln(tape, x2, vars.ln3);
    let h1 = tape.matmul(xn3, vars.ffn_w1);
    let h1b = tape.add_row_broadcast(h1, vars.ffn_b1);
    let act = tape.gelu(h1b);
    let h2 = tape.matmul(act, vars.ffn_w2);
    let h2b = tape.add_row_broadcast(h2, vars.ffn_b2);
    let refined = tape.add(x2, h2b);

    if disable_discriminative {
        return refined;
    }

    // Discriminative selection + propagation; argmax indices are constants
    // of the differentiation (gradients flow through the selected rows).
    let feat_vals = tape.value(feat).clone();
    let q_vals = tape.value(refined).clone();
    let idx = discriminative_select_indices(&feat_vals, &q_vals, mask)
        .expect("mask length checked by caller");
    let q_s = match idx {
        Some(indices) => tape.gather_rows(feat, &indices),
        None => refined,
    };
    propagate_query_t(tape, q_in, refined, q_s, vars.alpha, vars.wout)
}

/// Masked cross attention with distinct key and value sources (the kernel
/// contract keeps them equal; the query blocks add positional encoding to
/// the keys only).
fn masked_cross_attention_kv_t(
    tape: &mut Tape,
    query: Var,
    key_src: Var,
    value_src: Var,
    mask: &[u8],
    w: &AttnVars,
    d: usize,
) -> Var {
    let q = tape.matmul(query, w.wq);
    let k = tape.matmul(key_src, w.wk);
    let v = tape.matmul(value_src, w.wv);
    let scores = tape.matmul_transb(q, k);
    let mut scaled = tape.scale(scores, 1.0 / libm::sqrt(d as f64));
    if mask.iter().any(|&m| m != 0) {
        let bias = tape.constant(crate::kernels::mask_bias_row(mask));
        scaled = tape.add_row_broadcast(scaled, bias);
    }
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

/// Per-pixel query readout at the stride-4 level: the maximum over queries
/// of the scaled projected similarity, shaped (1, H4·W4).
pub fn query_readout_t(
    tape: &mut Tape,
    feat4: Var,
    q: Var,
    feat_proj_w: Var,
    feat_proj_b: Var,
    query_proj_w: Var,
    query_proj_b: Var,
) -> Var {
    let c = tape.value(q).cols();
    let fp_lin = tape.matmul(feat4, feat_proj_w);
    let fp = tape.add_row_broadcast(fp_lin, feat_proj_b);
    let qp_lin = tape.matmul(q, query_proj_w);
    let qp = tape.add_row_broadcast(qp_lin, query_proj_b);
    let scores = tape.matmul_transb(qp, fp);
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(c as f64));
    tape.max_cols(scaled)
}
