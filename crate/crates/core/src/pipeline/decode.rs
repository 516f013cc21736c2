//! Per-object mask decoder: memory readout fused into the stride-16 level,
//! top-down refinement through strides 8 and 4 with lateral skips, a
//! 1×1 logit head plus the query readout, upsampled to the padded size.

use crate::backbone::PyramidVars;
use crate::config::ModelConfig;
use crate::params::{conv_init, linear_init, Binder, ParamStore};
use crate::query::query_readout_t;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn init_decoder_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    let c = cfg.channels;
    let (d16, d8, d4) = (c, c / 2, c / 4);
    store.insert("dec.fuse.w", conv_init(d16, c + cfg.value_dim, 3, rng), true);
    store.insert("dec.fuse.b", Tensor::zeros(&[d16]), true);
    store.insert("dec.proj16_8.w", conv_init(d8, d16, 1, rng), true);
    store.insert("dec.proj16_8.b", Tensor::zeros(&[d8]), true);
    store.insert("dec.lat8.w", conv_init(d8, c, 1, rng), true);
    store.insert("dec.lat8.b", Tensor::zeros(&[d8]), true);
    store.insert("dec.conv8.w", conv_init(d8, d8, 3, rng), true);
    store.insert("dec.conv8.b", Tensor::zeros(&[d8]), true);
    store.insert("dec.proj8_4.w", conv_init(d4, d8, 1, rng), true);
    store.insert("dec.proj8_4.b", Tensor::zeros(&[d4]), true);
    store.insert("dec.lat4.w", conv_init(d4, c, 1, rng), true);
    store.insert("dec.lat4.b", Tensor::zeros(&[d4]), true);
    store.insert("dec.conv4.w", conv_init(d4, d4, 3, rng), true);
    store.insert("dec.conv4.b", Tensor::zeros(&[d4]), true);
    store.insert("dec.head.w", conv_init(1, d4, 1, rng), true);
    store.insert("dec.head.b", Tensor::zeros(&[1]), true);
    store.insert("dec.qread.feat.w", linear_init(c, c, rng), true);
    store.insert("dec.qread.feat.b", Tensor::zeros(&[1, c]), true);
    store.insert("dec.qread.query.w", linear_init(c, c, rng), true);
    store.insert("dec.qread.query.b", Tensor::zeros(&[1, c]), true);
}

pub struct DecoderVars {
    fuse: (Var, Var),
    proj16_8: (Var, Var),
    lat8: (Var, Var),
    conv8: (Var, Var),
    proj8_4: (Var, Var),
    lat4: (Var, Var),
    conv4: (Var, Var),
    head: (Var, Var),
    qread_feat: (Var, Var),
    qread_query: (Var, Var),
}

impl DecoderVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, binder: &mut Binder) -> Self {
        let pair = |tape: &mut Tape, binder: &mut Binder, name: &str| -> (Var, Var) {
            (
                binder.bind(tape, store, &alloc::format!("dec.{name}.w")),
                binder.bind(tape, store, &alloc::format!("dec.{name}.b")),
            )
        };
        DecoderVars {
            fuse: pair(tape, binder, "fuse"),
            proj16_8: pair(tape, binder, "proj16_8"),
            lat8: pair(tape, binder, "lat8"),
            conv8: pair(tape, binder, "conv8"),
            proj8_4: pair(tape, binder, "proj8_4"),
            lat4: pair(tape, binder, "lat4"),
            conv4: pair(tape, binder, "conv4"),
            head: pair(tape, binder, "head"),
            qread_feat: pair(tape, binder, "qread.feat"),
            qread_query: pair(tape, binder, "qread.query"),
        }
    }
}

/// Decode one object's logit map (1, H, W) at the padded input size from
/// its memory readout tokens (L16, Cv) and propagated queries (N, C).
pub fn decode_t(
    tape: &mut Tape,
    pyramid: &PyramidVars,
    readout: Var,
    queries: Var,
    vars: &DecoderVars,
    padded: (usize, usize),
) -> Var {
    let i16 = pyramid.level_at_stride(16);
    let i8_ = pyramid.level_at_stride(8);
    let i4 = pyramid.level_at_stride(4);
    let lv16 = pyramid.meta.levels[i16].clone();
    let lv8 = pyramid.meta.levels[i8_].clone();
    let lv4 = pyramid.meta.levels[i4].clone();

    // Fold the readout tokens into a map and fuse with the s16 features.
    let cv = tape.value(readout).cols();
    let r_t = tape.transpose(readout);
    let r_map = tape.reshape(r_t, &[cv, lv16.h, lv16.w]);
    let p16 = pyramid.maps[i16];
    let c = tape.value(p16).dims()[0];
    let p16_flat = tape.reshape(p16, &[c, lv16.area()]);
    let r_flat = tape.reshape(r_map, &[cv, lv16.area()]);
    let cat = tape.concat_rows(&[p16_flat, r_flat]);
    let fuse_in = tape.reshape(cat, &[c + cv, lv16.h, lv16.w]);
    let fused = tape.conv2d(fuse_in, vars.fuse.0, Some(vars.fuse.1), 1, 1, 1);
    let x16 = tape.gelu(fused);

    // Stride 8.
    let up8_src = tape.conv2d(x16, vars.proj16_8.0, Some(vars.proj16_8.1), 1, 0, 1);
    let up8 = tape.resize(up8_src, lv8.h, lv8.w);
    let lat8 = tape.conv2d(pyramid.maps[i8_], vars.lat8.0, Some(vars.lat8.1), 1, 0, 1);
    let sum8 = tape.add(up8, lat8);
    let conv8 = tape.conv2d(sum8, vars.conv8.0, Some(vars.conv8.1), 1, 1, 1);
    let x8 = tape.gelu(conv8);

    // Stride 4.
    let up4_src = tape.conv2d(x8, vars.proj8_4.0, Some(vars.proj8_4.1), 1, 0, 1);
    let up4 = tape.resize(up4_src, lv4.h, lv4.w);
    let lat4 = tape.conv2d(pyramid.maps[i4], vars.lat4.0, Some(vars.lat4.1), 1, 0, 1);
    let sum4 = tape.add(up4, lat4);
    let conv4 = tape.conv2d(sum4, vars.conv4.0, Some(vars.conv4.1), 1, 1, 1);
    let x4 = tape.gelu(conv4);

    // Logit head plus query readout.
    let head = tape.conv2d(x4, vars.head.0, Some(vars.head.1), 1, 0, 1);
    let feat4_flat = tape.reshape(pyramid.maps[i4], &[c, lv4.area()]);
    let feat4_tokens = tape.transpose(feat4_flat);
    let qmap = query_readout_t(
        tape,
        feat4_tokens,
        queries,
        vars.qread_feat.0,
        vars.qread_feat.1,
        vars.qread_query.0,
        vars.qread_query.1,
    );
    let qmap3 = tape.reshape(qmap, &[1, lv4.h, lv4.w]);
    let logit4 = tape.add(head, qmap3);
    tape.resize(logit4, padded.0, padded.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::pyramid_meta;
    use crate::config::ModelConfig;
    use crate::kernels::fold_tokens_to_levels;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            value_dim: 6,
            num_queries: 2,
            deform_heads: 2,
            vit_width: 8,
            vit_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn store_with_decoder(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(seed);
        init_decoder_params(&mut store, cfg, &mut rng);
        store
    }

    fn random_pyramid(tape: &mut Tape, c: usize, h: usize, w: usize, rng: &mut Rng) -> PyramidVars {
        let meta = pyramid_meta(h, w);
        let tokens = tape.constant(Tensor::randn(&[meta.token_count(), c], 1.0, rng));
        let maps = fold_tokens_to_levels(tape, tokens, &meta);
        PyramidVars { maps, meta }
    }

    #[test]
    fn output_shape_is_padded_frame() {
        let cfg = tiny_cfg();
        let store = store_with_decoder(&cfg, 1);
        let mut rng = Rng::seed_from(2);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let vars = DecoderVars::bind(&mut tape, &store, &mut binder);
        let pyr = random_pyramid(&mut tape, cfg.channels, 64, 32, &mut rng);
        let l16 = pyr.meta.levels[pyr.level_at_stride(16)].area();
        let readout = tape.constant(Tensor::randn(&[l16, cfg.value_dim], 1.0, &mut rng));
        let queries = tape.constant(Tensor::randn(&[cfg.num_queries, cfg.channels], 1.0, &mut rng));
        let out = decode_t(&mut tape, &pyr, readout, queries, &vars, (64, 32));
        assert_eq!(tape.value(out).dims(), &[1, 64, 32]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn zero_parameters_and_readout_give_zero_logits() {
        let cfg = tiny_cfg();
        let mut store = store_with_decoder(&cfg, 3);
        let names: alloc::vec::Vec<alloc::string::String> =
            store.entries().iter().map(|e| e.name.clone()).collect();
        for n in names {
            let idx = store.entry_index(&n).unwrap();
            let dims = store.entries()[idx].tensor.dims().to_vec();
            store.entries_mut()[idx].tensor = Tensor::zeros(&dims);
        }
        let mut rng = Rng::seed_from(4);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let vars = DecoderVars::bind(&mut tape, &store, &mut binder);
        let pyr = random_pyramid(&mut tape, cfg.channels, 32, 32, &mut rng);
        let l16 = pyr.meta.levels[pyr.level_at_stride(16)].area();
        let readout = tape.constant(Tensor::zeros(&[l16, cfg.value_dim]));
        let queries = tape.constant(Tensor::randn(&[cfg.num_queries, cfg.channels], 1.0, &mut rng));
        let out = decode_t(&mut tape, &pyr, readout, queries, &vars, (32, 32));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }
}
