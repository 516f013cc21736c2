//! Per-frame model forward shared by inference and training, and the
//! sequence-inference session owning the dual-level memory.

use alloc::vec::Vec;

use super::aggregate::{field_argmax_labels, soft_aggregate_probs_t};
use super::decode::{decode_t, DecoderVars};
use super::{crop_mask, pad_to_32, CropRecord};
use crate::backbone::{backbone_forward_t, PyramidVars};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kernels::unfold_levels_to_tokens;
use crate::mask::{maxpool_mask, LabelMask};
use crate::memory::{
    encode_value_t, key_tokens_t, memory_read_t, KeyProjVars, ObjectMemory, PixelEntry,
    PixelMemory, ValueEncoderVars,
};
use crate::params::{Binder, ParamStore};
use crate::query::{query_block_t, QueryBlockVars};
use crate::rng::Rng;
use crate::synth::RgbImage;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{sinusoidal_pe_2d, vit_forward};

pub fn frame_to_tensor(img: &RgbImage) -> Tensor {
    img.to_tensor()
}

/// Trunk outputs for one padded frame.
pub(crate) struct FrameFeatures {
    pub frame: Var,
    pub pyramid: PyramidVars,
    /// (L16, C) tokens of the stride-16 level.
    pub s16_tokens: Var,
    /// Fixed sinusoidal positions for those tokens.
    pub s16_pos: Var,
    /// (L16, Ck) memory keys for this frame.
    pub keys: Var,
    pub padded: (usize, usize),
}

pub(crate) fn forward_features(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    cfg: &RunConfig,
    frame_t: &Tensor,
) -> Result<FrameFeatures> {
    let vit = vit_forward(frame_t, store, &cfg.model)?;
    let padded = (frame_t.dims()[1], frame_t.dims()[2]);
    let frame = tape.constant(frame_t.clone());
    let pyramid = backbone_forward_t(tape, frame, &vit, store, binder, &cfg.model, &cfg.ablation);
    let i16 = pyramid.level_at_stride(16);
    let lv16 = pyramid.meta.levels[i16].clone();
    let s16_tokens = unfold_levels_to_tokens(tape, &pyramid.maps[i16..=i16]);
    let s16_pos = tape.constant(sinusoidal_pe_2d(lv16.h, lv16.w, cfg.model.channels));
    let key_proj = KeyProjVars::bind(tape, store, binder);
    let keys = key_tokens_t(tape, s16_tokens, &key_proj);
    Ok(FrameFeatures {
        frame,
        pyramid,
        s16_tokens,
        s16_pos,
        keys,
        padded,
    })
}

/// One object's head: memory readout, query-transformer stack, decoder.
/// Returns the padded logit map (1,H,W) and the propagated queries (N,C).
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_object(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    cfg: &RunConfig,
    feats: &FrameFeatures,
    mem_keys: &[Var],
    mem_values: &[Var],
    q_in: Var,
    mask16: &[u8],
) -> (Var, Var) {
    let readout = memory_read_t(tape, feats.keys, mem_keys, mem_values, cfg.model.top_k);
    let mut q = q_in;
    for b in 0..cfg.model.query_depth {
        let vars = QueryBlockVars::bind(tape, store, binder, b);
        q = query_block_t(
            tape,
            feats.s16_tokens,
            feats.s16_pos,
            q,
            mask16,
            &vars,
            cfg.model.channels,
            cfg.ablation.disable_discriminative_query,
        );
    }
    let dec = DecoderVars::bind(tape, store, binder);
    let logits = decode_t(tape, &feats.pyramid, readout, q, &dec, feats.padded);
    (logits, q)
}

/// Per-object value encoding for a memory write; `own`/`others` are
/// full-resolution binary masks at the padded size.
pub(crate) fn encode_object_value(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    feats: &FrameFeatures,
    own: &[u8],
    others: &[u8],
) -> Var {
    let (h, w) = feats.padded;
    let to_map = |bits: &[u8]| -> Tensor {
        Tensor::new(&[1, h, w], bits.iter().map(|&b| f64::from(b)).collect())
    };
    let vars = ValueEncoderVars::bind(tape, store, binder);
    let own_v = tape.constant(to_map(own));
    let oth_v = tape.constant(to_map(others));
    let i16 = feats.pyramid.level_at_stride(16);
    encode_value_t(tape, feats.frame, own_v, oth_v, feats.pyramid.maps[i16], &vars)
}

/// Aggregate per-object logit maps into the label field and hard labels.
pub(crate) fn aggregate_frame(
    tape: &mut Tape,
    logits: &[Var],
    padded: (usize, usize),
    ids: &[u8],
) -> (Var, LabelMask, Vec<Vec<u8>>) {
    let (h, w) = padded;
    let probs: Vec<Var> = logits
        .iter()
        .map(|&l| {
            let flat = tape.reshape(l, &[h * w, 1]);
            tape.sigmoid(flat)
        })
        .collect();
    let field = soft_aggregate_probs_t(tape, &probs);
    let labels = field_argmax_labels(tape.value(field), ids);
    let pred = LabelMask::new(h, w, labels).expect("sized by construction");
    let own_bits: Vec<Vec<u8>> = ids.iter().map(|&id| pred.binary(id)).collect();
    (field, pred, own_bits)
}

/// Semi-supervised inference over one sequence: initialized with the first
/// frame and its annotation, then advanced frame by frame. Pixel memory
/// and the per-object query means update every `mem_interval`-th frame;
/// an object with an empty predicted mask contributes no writes.
pub struct SequenceSession<'a> {
    store: &'a ParamStore,
    cfg: &'a RunConfig,
    state: Option<SessionState>,
}

struct SessionState {
    object_ids: Vec<u8>,
    mem: PixelMemory<Tensor>,
    obj_mem: Vec<ObjectMemory>,
    masks16: Vec<Vec<u8>>,
    padded: (usize, usize),
    crop: CropRecord,
    palette: Vec<[u8; 3]>,
    frame_counter: usize,
}

impl<'a> SequenceSession<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a RunConfig) -> Self {
        SequenceSession { store, cfg, state: None }
    }

    pub fn initialized(&self) -> bool {
        self.state.is_some()
    }

    pub fn object_ids(&self) -> &[u8] {
        self.state.as_ref().map_or(&[], |s| &s.object_ids)
    }

    /// Frame indices currently held in pixel memory.
    pub fn memory_frames(&self) -> Vec<usize> {
        self.state.as_ref().map_or_else(Vec::new, |s| s.mem.frame_indices())
    }

    /// Anchor on the annotated first frame; returns the annotation
    /// unchanged.
    pub fn initialize(&mut self, frame: &RgbImage, init_mask: &LabelMask) -> Result<LabelMask> {
        if init_mask.h != frame.h || init_mask.w != frame.w {
            return Err(Error::Shape(alloc::format!(
                "mask {}x{} does not match frame {}x{}",
                init_mask.h,
                init_mask.w,
                frame.h,
                frame.w
            )));
        }
        let object_ids = init_mask.ids_present();
        if object_ids.is_empty() {
            return Err(Error::Value("initial mask contains no objects".into()));
        }
        let frame_t = frame_to_tensor(frame);
        let (padded_frame, padded_masks, crop) =
            pad_to_32(&frame_t, core::slice::from_ref(init_mask));
        let pmask = &padded_masks[0];
        let padded = (padded_frame.dims()[1], padded_frame.dims()[2]);

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let feats = forward_features(&mut tape, &mut binder, self.store, self.cfg, &padded_frame)?;

        // Ground-truth memory entry for every object.
        let mut values = Vec::with_capacity(object_ids.len());
        let mut masks16 = Vec::with_capacity(object_ids.len());
        for &id in &object_ids {
            let own = pmask.binary(id);
            let others = pmask.binary_others(id, &object_ids);
            let v = encode_object_value(&mut tape, &mut binder, self.store, &feats, &own, &others);
            values.push(Some(tape.value(v).clone()));
            masks16.push(maxpool_mask(&own, padded.0, padded.1, 16));
        }
        let mut mem = PixelMemory::new(self.cfg.model.mem_capacity);
        mem.write_checked(PixelEntry {
            frame_index: 0,
            key: tape.value(feats.keys).clone(),
            values,
        })?;

        // Propagate the learned initial queries once and seed the object
        // memory with the result.
        let n = self.cfg.model.num_queries;
        let c = self.cfg.model.channels;
        let mut obj_mem = Vec::with_capacity(object_ids.len());
        for (slot, _id) in object_ids.iter().enumerate() {
            let q0 = binder.bind(&mut tape, self.store, "query.init");
            let mut q = q0;
            for b in 0..self.cfg.model.query_depth {
                let vars = QueryBlockVars::bind(&mut tape, self.store, &mut binder, b);
                q = query_block_t(
                    &mut tape,
                    feats.s16_tokens,
                    feats.s16_pos,
                    q,
                    &masks16[slot],
                    &vars,
                    c,
                    self.cfg.ablation.disable_discriminative_query,
                );
            }
            let mut om = ObjectMemory::empty(n, c);
            om.update(tape.value(q));
            obj_mem.push(om);
        }

        self.state = Some(SessionState {
            object_ids,
            mem,
            obj_mem,
            masks16,
            padded,
            crop,
            palette: init_mask.palette.clone(),
            frame_counter: 1,
        });
        Ok(init_mask.clone())
    }

    /// Segment the next frame.
    pub fn process(&mut self, frame: &RgbImage) -> Result<LabelMask> {
        let cfg = self.cfg;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Value("uninitialized session (no annotated first frame)".into()))?;
        let frame_t = frame_to_tensor(frame);
        let (padded_frame, _, crop) = pad_to_32(&frame_t, &[]);
        if (padded_frame.dims()[1], padded_frame.dims()[2]) != state.padded || crop != state.crop {
            return Err(Error::Shape("frame size changed mid-sequence".into()));
        }

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let feats = forward_features(&mut tape, &mut binder, self.store, cfg, &padded_frame)?;

        let k = state.object_ids.len();
        let mut logits = Vec::with_capacity(k);
        let mut queries = Vec::with_capacity(k);
        for slot in 0..k {
            let mut mem_keys = Vec::new();
            let mut mem_vals = Vec::new();
            for e in state.mem.entries() {
                if let Some(v) = &e.values[slot] {
                    mem_keys.push(tape.constant(e.key.clone()));
                    mem_vals.push(tape.constant(v.clone()));
                }
            }
            let q_in = tape.constant(state.obj_mem[slot].mean_query.clone());
            let (logit, q) = forward_object(
                &mut tape,
                &mut binder,
                self.store,
                cfg,
                &feats,
                &mem_keys,
                &mem_vals,
                q_in,
                &state.masks16[slot],
            );
            logits.push(logit);
            queries.push(q);
        }

        let (_field, pred, own_bits) =
            aggregate_frame(&mut tape, &logits, state.padded, &state.object_ids);

        // Memory schedule: every mem_interval-th frame; empty objects skip.
        if state.frame_counter % cfg.model.mem_interval == 0 {
            let any_present = own_bits.iter().any(|b| b.iter().any(|&x| x != 0));
            if any_present {
                let mut values = Vec::with_capacity(k);
                for slot in 0..k {
                    if own_bits[slot].iter().any(|&x| x != 0) {
                        let others: Vec<u8> = {
                            let mut u = alloc::vec![0u8; own_bits[slot].len()];
                            for (other, bits) in own_bits.iter().enumerate() {
                                if other == slot {
                                    continue;
                                }
                                for (dst, &b) in u.iter_mut().zip(bits) {
                                    *dst |= b;
                                }
                            }
                            u
                        };
                        let v = encode_object_value(
                            &mut tape,
                            &mut binder,
                            self.store,
                            &feats,
                            &own_bits[slot],
                            &others,
                        );
                        values.push(Some(tape.value(v).clone()));
                        state.obj_mem[slot].update(tape.value(queries[slot]));
                    } else {
                        values.push(None);
                    }
                }
                state.mem.write_checked(PixelEntry {
                    frame_index: state.frame_counter,
                    key: tape.value(feats.keys).clone(),
                    values,
                })?;
            }
        }

        for (slot, bits) in own_bits.iter().enumerate() {
            state.masks16[slot] = maxpool_mask(bits, state.padded.0, state.padded.1, 16);
        }
        state.frame_counter += 1;

        let mut out = crop_mask(&pred, state.crop);
        out.palette = state.palette.clone();
        Ok(out)
    }
}

/// Seeded choice of reference memory entries for training: all entries
/// when at most `limit` exist, otherwise a uniform sample of `limit`.
pub(crate) fn choose_reference_entries(total: usize, limit: usize, rng: &mut Rng) -> Vec<usize> {
    if total <= limit {
        (0..total).collect()
    } else {
        let mut idx = rng.sample_indices(total, limit);
        idx.sort_unstable();
        idx
    }
}
