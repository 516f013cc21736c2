//! Spatial-semantic feature generator: convolutional multi-scale stem,
//! frozen ViT taps, and N stacked spatial-semantic blocks.
//!
//! Each block runs semantic embedding (cross attention of the multi-scale
//! tokens against the projected CLS/global pair, plus residual), spatial
//! dependency modeling (deformable attention whose offsets and weights are
//! driven by ViT-augmented queries, plus residual) and a convolutional
//! feed-forward combined as `spa + conv_ffn(spa + prev)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{AblationConfig, ModelConfig};
use crate::error::Result;
use crate::kernels::{
    cross_attention_t, deformable_attention_t, fold_tokens_to_levels, unfold_levels_to_tokens,
    AttnVars, ConvFfnVars, DeformConfig, DeformVars, LevelSpec, TokenMeta, TokenTensor,
};
use crate::params::{conv_init, linear_init, Binder, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::VitState;

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Level layout of the pyramid for a padded input.
pub fn pyramid_meta(h: usize, w: usize) -> TokenMeta {
    assert!(h % 32 == 0 && w % 32 == 0, "input {h}x{w} not padded");
    TokenMeta::from_levels(
        PYRAMID_STRIDES
            .iter()
            .map(|&s| LevelSpec { stride: s, h: h / s, w: w / s })
            .collect(),
    )
}

/// Multi-scale feature maps at strides 4/8/16/32, tape-resident.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub maps: Vec<Var>,
    pub meta: TokenMeta,
}

impl PyramidVars {
    pub fn from_tokens(tape: &mut Tape, tokens: Var, meta: &TokenMeta) -> Self {
        let maps = fold_tokens_to_levels(tape, tokens, meta);
        PyramidVars { maps, meta: meta.clone() }
    }

    pub fn tokens(&self, tape: &mut Tape) -> Var {
        unfold_levels_to_tokens(tape, &self.maps)
    }

    /// Index of the level at the given stride.
    pub fn level_at_stride(&self, stride: usize) -> usize {
        self.meta
            .levels
            .iter()
            .position(|lv| lv.stride == stride)
            .unwrap_or_else(|| panic!("no pyramid level at stride {stride}"))
    }
}

/// Tensor-form pyramid, the storage/reporting counterpart of
/// [`PyramidVars`]; convertible to and from [`TokenTensor`].
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
    pub meta: TokenMeta,
}

impl FeaturePyramid {
    pub fn from_vars(tape: &Tape, vars: &PyramidVars) -> Self {
        FeaturePyramid {
            maps: vars.maps.iter().map(|&v| tape.value(v).clone()).collect(),
            meta: vars.meta.clone(),
        }
    }

    pub fn to_tokens(&self) -> Result<TokenTensor> {
        let mut tape = Tape::new();
        let maps: Vec<Var> = self.maps.iter().map(|m| tape.constant(m.clone())).collect();
        let tokens = unfold_levels_to_tokens(&mut tape, &maps);
        TokenTensor::new(tape.value(tokens).clone(), self.meta.clone())
    }

    pub fn from_tokens(tokens: &TokenTensor) -> Self {
        let mut tape = Tape::new();
        let v = tape.constant(tokens.data.clone());
        let maps = fold_tokens_to_levels(&mut tape, v, &tokens.meta);
        FeaturePyramid {
            maps: maps.iter().map(|&m| tape.value(m).clone()).collect(),
            meta: tokens.meta.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

pub fn init_backbone_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    let c = cfg.channels;
    let half = c / 2;
    store.insert("stem.conv0.w", conv_init(half, 3, 3, rng), true);
    store.insert("stem.conv0.b", Tensor::zeros(&[half]), true);
    store.insert("stem.conv1.w", conv_init(c, half, 3, rng), true);
    store.insert("stem.conv1.b", Tensor::zeros(&[c]), true);
    for i in 2..5 {
        store.insert(&format!("stem.conv{i}.w"), conv_init(c, c, 3, rng), true);
        store.insert(&format!("stem.conv{i}.b"), Tensor::zeros(&[c]), true);
    }
    let hlp = cfg.deform_heads * PYRAMID_STRIDES.len() * cfg.deform_points;
    let ce = c * cfg.ffn_expand;
    for b in 0..cfg.num_blocks {
        let p = |s: &str| -> String { format!("block{b}.{s}") };
        store.insert(&p("sem.in_proj.w"), linear_init(cfg.vit_width, c, rng), true);
        store.insert(&p("sem.in_proj.b"), Tensor::zeros(&[1, c]), true);
        store.insert(&p("sem.wq"), linear_init(c, c, rng), true);
        store.insert(&p("sem.wk"), linear_init(c, c, rng), true);
        store.insert(&p("sem.wv"), linear_init(c, c, rng), true);
        store.insert(&p("def.aug.w"), linear_init(cfg.vit_width, c, rng), true);
        store.insert(&p("def.aug.b"), Tensor::zeros(&[1, c]), true);
        // Identity-like start: zero offsets, uniform attention.
        store.insert(&p("def.offset.w"), Tensor::zeros(&[c, hlp * 2]), true);
        store.insert(&p("def.offset.b"), Tensor::zeros(&[1, hlp * 2]), true);
        store.insert(&p("def.weight.w"), Tensor::zeros(&[c, hlp]), true);
        store.insert(&p("def.weight.b"), Tensor::zeros(&[1, hlp]), true);
        store.insert(&p("def.val.w"), linear_init(c, c, rng), true);
        store.insert(&p("def.out.w"), linear_init(c, c, rng), true);
        store.insert(&p("ffn.expand.w"), linear_init(c, ce, rng), true);
        store.insert(&p("ffn.expand.b"), Tensor::zeros(&[1, ce]), true);
        store.insert(&p("ffn.dw.w"), conv_init(ce, 1, 3, rng), true);
        store.insert(&p("ffn.dw.b"), Tensor::zeros(&[ce]), true);
        store.insert(&p("ffn.project.w"), linear_init(ce, c, rng), true);
        store.insert(&p("ffn.project.b"), Tensor::zeros(&[1, c]), true);
    }
}

struct StemVars {
    convs: Vec<(Var, Var)>,
}

impl StemVars {
    fn bind(tape: &mut Tape, store: &ParamStore, binder: &mut Binder) -> Self {
        let convs = (0..5)
            .map(|i| {
                (
                    binder.bind(tape, store, &format!("stem.conv{i}.w")),
                    binder.bind(tape, store, &format!("stem.conv{i}.b")),
                )
            })
            .collect();
        StemVars { convs }
    }
}

/// One spatial-semantic block's tape-bound parameters.
pub struct BlockVars {
    pub sem_in_proj_w: Var,
    pub sem_in_proj_b: Var,
    pub sem_attn: AttnVars,
    pub aug_w: Var,
    pub aug_b: Var,
    pub deform: DeformVars,
    pub ffn: ConvFfnVars,
}

impl BlockVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, binder: &mut Binder, b: usize) -> Self {
        let p = |s: &str| -> String { format!("block{b}.{s}") };
        BlockVars {
            sem_in_proj_w: binder.bind(tape, store, &p("sem.in_proj.w")),
            sem_in_proj_b: binder.bind(tape, store, &p("sem.in_proj.b")),
            sem_attn: AttnVars {
                wq: binder.bind(tape, store, &p("sem.wq")),
                wk: binder.bind(tape, store, &p("sem.wk")),
                wv: binder.bind(tape, store, &p("sem.wv")),
            },
            aug_w: binder.bind(tape, store, &p("def.aug.w")),
            aug_b: binder.bind(tape, store, &p("def.aug.b")),
            deform: DeformVars {
                w_offset: binder.bind(tape, store, &p("def.offset.w")),
                b_offset: binder.bind(tape, store, &p("def.offset.b")),
                w_weight: binder.bind(tape, store, &p("def.weight.w")),
                b_weight: binder.bind(tape, store, &p("def.weight.b")),
                w_val: binder.bind(tape, store, &p("def.val.w")),
                w_out: binder.bind(tape, store, &p("def.out.w")),
            },
            ffn: ConvFfnVars {
                w_expand: binder.bind(tape, store, &p("ffn.expand.w")),
                b_expand: binder.bind(tape, store, &p("ffn.expand.b")),
                w_dw: binder.bind(tape, store, &p("ffn.dw.w")),
                b_dw: binder.bind(tape, store, &p("ffn.dw.b")),
                w_project: binder.bind(tape, store, &p("ffn.project.w")),
                b_project: binder.bind(tape, store, &p("ffn.project.b")),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// Multi-scale stem: strided 3×3 convolutions producing strides 4/8/16/32
/// at common width C.
fn stem_forward_t(tape: &mut Tape, frame: Var, vars: &StemVars) -> PyramidVars {
    let dims = tape.value(frame).dims().to_vec();
    let meta = pyramid_meta(dims[1], dims[2]);
    let s2 = tape.conv2d(frame, vars.convs[0].0, Some(vars.convs[0].1), 2, 1, 1);
    let a2 = tape.gelu(s2);
    let s4 = tape.conv2d(a2, vars.convs[1].0, Some(vars.convs[1].1), 2, 1, 1);
    let mut maps = vec![s4];
    for i in 2..5 {
        let prev = *maps.last().unwrap();
        let act = tape.gelu(prev);
        maps.push(tape.conv2d(act, vars.convs[i].0, Some(vars.convs[i].1), 2, 1, 1));
    }
    PyramidVars { maps, meta }
}

/// Arithmetic mean over patch tokens.
pub fn global_token(patch_tokens: &Tensor) -> Tensor {
    let (l, c) = (patch_tokens.rows(), patch_tokens.cols());
    assert!(l >= 1, "global token of empty sequence");
    let mut out = Tensor::zeros(&[1, c]);
    for i in 0..l {
        for j in 0..c {
            let v = out.at2(0, j) + patch_tokens.at2(i, j);
            out.set2(0, j, v);
        }
    }
    out.scale(1.0 / l as f64)
}

/// Semantic embedding: cross attention with the multi-scale tokens as the
/// query and the projected (CLS, global) pair as key/value, plus residual.
pub fn semantic_embed_t(
    tape: &mut Tape,
    prev: Var,
    cls: Var,
    g: Var,
    vars: &BlockVars,
    d: usize,
) -> Var {
    let pair = tape.concat_rows(&[cls, g]);
    let projected = tape.matmul(pair, vars.sem_in_proj_w);
    let keys = tape.add_row_broadcast(projected, vars.sem_in_proj_b);
    let attn = cross_attention_t(tape, prev, keys, keys, &vars.sem_attn, d);
    tape.add(prev, attn)
}

/// Spatial dependency modeling: deformable attention over the semantic
/// tokens, with offsets and attention weights driven by the ViT-augmented
/// queries, plus residual.
pub fn spatial_modeling_t(
    tape: &mut Tape,
    sem: Var,
    meta: &TokenMeta,
    vit_map: Var,
    vars: &BlockVars,
    deform_cfg: DeformConfig,
) -> Var {
    // ViT patch features resized to every level and projected to width C.
    let mut aug_parts = Vec::with_capacity(meta.levels.len());
    for lv in &meta.levels {
        let resized = tape.resize(vit_map, lv.h, lv.w);
        let dims = tape.value(resized).dims().to_vec();
        let flat = tape.reshape(resized, &[dims[0], dims[1] * dims[2]]);
        aug_parts.push(tape.transpose(flat));
    }
    let vit_tokens = tape.concat_rows(&aug_parts);
    let aug_lin = tape.matmul(vit_tokens, vars.aug_w);
    let aug = tape.add_row_broadcast(aug_lin, vars.aug_b);
    let q_aug = tape.add(sem, aug);

    let value_levels = fold_tokens_to_levels(tape, sem, meta);
    let deformed = deformable_attention_t(tape, q_aug, meta, &value_levels, deform_cfg, &vars.deform);
    tape.add(sem, deformed)
}

/// One spatial-semantic block: `spa + conv_ffn(spa + prev)` per the block
/// composition, honoring the ablation switches by identity passthrough.
#[allow(clippy::too_many_arguments)]
pub fn block_forward_t(
    tape: &mut Tape,
    prev: Var,
    meta: &TokenMeta,
    cls: Var,
    g: Var,
    vit_map: Var,
    vars: &BlockVars,
    cfg: &ModelConfig,
    ablation: &AblationConfig,
) -> Var {
    let sem = if ablation.disable_semantic_embed {
        prev
    } else {
        semantic_embed_t(tape, prev, cls, g, vars, cfg.channels)
    };
    let deform_cfg = DeformConfig {
        heads: cfg.deform_heads,
        points_per_level: cfg.deform_points,
    };
    let spa = if ablation.disable_spatial_modeling {
        sem
    } else {
        spatial_modeling_t(tape, sem, meta, vit_map, vars, deform_cfg)
    };
    let mixed = tape.add(spa, prev);
    let ffn = crate::kernels::conv_ffn_t(tape, mixed, meta, &vars.ffn);
    tape.add(spa, ffn)
}

/// Full backbone on the tape: stem pyramid refined by the spatial-semantic
/// blocks fed from the tapped ViT layers.
pub fn backbone_forward_t(
    tape: &mut Tape,
    frame: Var,
    vit: &VitState,
    store: &ParamStore,
    binder: &mut Binder,
    cfg: &ModelConfig,
    ablation: &AblationConfig,
) -> PyramidVars {
    let stem_vars = StemVars::bind(tape, store, binder);
    let pyramid = stem_forward_t(tape, frame, &stem_vars);
    let meta = pyramid.meta.clone();
    let mut tokens = pyramid.tokens(tape);
    assert!(
        vit.taps.len() >= cfg.num_blocks,
        "ViT taps {} < blocks {}",
        vit.taps.len(),
        cfg.num_blocks
    );
    for b in 0..cfg.num_blocks {
        let vars = BlockVars::bind(tape, store, binder, b);
        let tap = &vit.taps[b];
        let cls = tape.constant(tap.cls_token.clone());
        let g = tape.constant(global_token(&tap.patch_tokens));
        let vit_tokens = tape.constant(tap.patch_tokens.clone());
        let t = tape.transpose(vit_tokens);
        let vit_map = tape.reshape(t, &[cfg.vit_width, vit.grid.0, vit.grid.1]);
        tokens = block_forward_t(tape, tokens, &meta, cls, g, vit_map, &vars, cfg, ablation);
    }
    PyramidVars::from_tokens(tape, tokens, &meta)
}

/// Standalone backbone forward: pads nothing, expects a (3,H,W) frame with
/// H, W multiples of 32, runs the frozen ViT and the trainable stack.
pub fn backbone_forward(
    frame: &Tensor,
    store: &ParamStore,
    cfg: &ModelConfig,
    ablation: &AblationConfig,
) -> Result<FeaturePyramid> {
    let vit = crate::vit::vit_forward(frame, store, cfg)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let f = tape.constant(frame.clone());
    let pyr = backbone_forward_t(&mut tape, f, &vit, store, &mut binder, cfg, ablation);
    Ok(FeaturePyramid::from_vars(&tape, &pyr))
}
