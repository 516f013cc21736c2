//! Training: decoupled-weight-decay Adam over clips with reference-memory
//! sampling and backpropagation through time across the clip frames.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::loss::{frame_loss_t, gt_channel_indices, sample_point_subset, train_loss_t};
use super::sample::{augment_clip, sample_training_clip, ClipSpec};
use super::session::{
    aggregate_frame, choose_reference_entries, encode_object_value, forward_features,
    forward_object,
};
use super::{init_model_params, pad_to_32};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mask::{maxpool_mask, LabelMask};
use crate::params::{Binder, ParamStore};
use crate::query::query_block_t;
use crate::query::QueryBlockVars;
use crate::rng::Rng;
use crate::synth::SyntheticDataset;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Decay applies to matrix/kernel
/// parameters only (ndim >= 2); biases, gains and other vectors are
/// exempt.
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        AdamW {
            m: store.entries().iter().map(|e| Tensor::zeros(e.tensor.dims())).collect(),
            v: store.entries().iter().map(|e| Tensor::zeros(e.tensor.dims())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(usize, Tensor)],
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (idx, g) in grads {
            let entry = &mut store.entries_mut()[*idx];
            debug_assert!(entry.trainable, "gradient for frozen parameter {}", entry.name);
            let decay = if entry.tensor.dims().len() >= 2 { weight_decay } else { 0.0 };
            let m = &mut self.m[*idx];
            let v = &mut self.v[*idx];
            let p = entry.tensor.data_mut();
            let gd = g.data();
            for i in 0..p.len() {
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gd[i];
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p[i] -= lr * (mhat / (libm::sqrt(vhat) + self.eps) + decay * p[i]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub lr: f64,
}

struct TapeMemEntry {
    key: Var,
    values: Vec<Option<Var>>,
}

/// Forward one clip with BPTT and return (loss, ce, dice, gradients).
fn clip_backward(
    dataset: &SyntheticDataset,
    clip: &ClipSpec,
    cfg: &RunConfig,
    store: &ParamStore,
    rng: &mut Rng,
) -> Result<(f64, f64, f64, Vec<(usize, Tensor)>)> {
    let seq = &dataset.sequences[clip.seq_index];
    let mut frames: Vec<Tensor> = clip
        .frame_indices
        .iter()
        .map(|&f| seq.frames[f].to_tensor())
        .collect();
    let mut masks: Vec<LabelMask> = clip
        .frame_indices
        .iter()
        .map(|&f| seq.annotations[f].clone())
        .collect();
    augment_clip(&mut frames, &mut masks, &cfg.train, rng);

    let ids = &clip.object_ids;
    let k = ids.len();
    let mut tape = Tape::new();
    let mut binder = Binder::new();

    let mut mem_entries: Vec<TapeMemEntry> = Vec::new();
    let mut om_means: Vec<Var> = Vec::new();
    let mut om_counts: Vec<usize> = Vec::new();
    let mut masks16: Vec<Vec<u8>> = Vec::new();
    let mut frame_losses = Vec::new();

    for (t, frame) in frames.iter().enumerate() {
        let (padded_frame, padded_masks, _) = pad_to_32(frame, core::slice::from_ref(&masks[t]));
        let gt = &padded_masks[0];
        let padded = (padded_frame.dims()[1], padded_frame.dims()[2]);
        let feats = forward_features(&mut tape, &mut binder, store, cfg, &padded_frame)?;

        if t == 0 {
            // Ground-truth anchor: write memory, seed per-object queries.
            let mut values = Vec::with_capacity(k);
            for &id in ids {
                let own = gt.binary(id);
                if own.iter().any(|&b| b != 0) {
                    let others = gt.binary_others(id, ids);
                    let v = encode_object_value(&mut tape, &mut binder, store, &feats, &own, &others);
                    values.push(Some(v));
                } else {
                    values.push(None);
                }
                masks16.push(maxpool_mask(&own, padded.0, padded.1, 16));
            }
            mem_entries.push(TapeMemEntry { key: feats.keys, values });
            for slot in 0..k {
                let mut q = binder.bind(&mut tape, store, "query.init");
                for b in 0..cfg.model.query_depth {
                    let vars = QueryBlockVars::bind(&mut tape, store, &mut binder, b);
                    q = query_block_t(
                        &mut tape,
                        feats.s16_tokens,
                        feats.s16_pos,
                        q,
                        &masks16[slot],
                        &vars,
                        cfg.model.channels,
                        cfg.ablation.disable_discriminative_query,
                    );
                }
                om_means.push(q);
                om_counts.push(1);
            }
            continue;
        }

        // Reference memory: all past entries up to num_ref_frames, sampled.
        let chosen = choose_reference_entries(mem_entries.len(), cfg.train.num_ref_frames, rng);
        let mut logits = Vec::with_capacity(k);
        let mut queries = Vec::with_capacity(k);
        for slot in 0..k {
            let mut mem_keys = Vec::new();
            let mut mem_vals = Vec::new();
            for &e in &chosen {
                if let Some(v) = mem_entries[e].values[slot] {
                    mem_keys.push(mem_entries[e].key);
                    mem_vals.push(v);
                }
            }
            let (logit, q) = forward_object(
                &mut tape,
                &mut binder,
                store,
                cfg,
                &feats,
                &mem_keys,
                &mem_vals,
                om_means[slot],
                &masks16[slot],
            );
            logits.push(logit);
            queries.push(q);
        }

        let (field, _pred, own_bits) = aggregate_frame(&mut tape, &logits, padded, ids);
        let gt_ch = gt_channel_indices(gt, ids);
        let subset = sample_point_subset(padded.0 * padded.1, cfg.train.point_fraction, rng);
        frame_losses.push(frame_loss_t(&mut tape, field, &gt_ch, subset.as_deref()));

        // Every processed frame becomes a reference candidate, encoded from
        // the predicted hard masks; empty objects skip their slot.
        let mut values = Vec::with_capacity(k);
        for slot in 0..k {
            if own_bits[slot].iter().any(|&b| b != 0) {
                let others: Vec<u8> = {
                    let mut u = alloc::vec![0u8; own_bits[slot].len()];
                    for (other, bits) in own_bits.iter().enumerate() {
                        if other != slot {
                            for (dst, &b) in u.iter_mut().zip(bits) {
                                *dst |= b;
                            }
                        }
                    }
                    u
                };
                let v = encode_object_value(
                    &mut tape,
                    &mut binder,
                    store,
                    &feats,
                    &own_bits[slot],
                    &others,
                );
                values.push(Some(v));
                om_means[slot] = crate::memory::object_memory_update_t(
                    &mut tape,
                    om_means[slot],
                    om_counts[slot],
                    queries[slot],
                );
                om_counts[slot] += 1;
            } else {
                values.push(None);
            }
        }
        if values.iter().any(Option::is_some) {
            mem_entries.push(TapeMemEntry { key: feats.keys, values });
        }
        for (slot, bits) in own_bits.iter().enumerate() {
            masks16[slot] = maxpool_mask(bits, padded.0, padded.1, 16);
        }
    }

    let (total, ce, dice) = train_loss_t(&mut tape, &frame_losses);
    let loss_val = tape.value(total).data()[0];
    let ce_val = tape.value(ce).data()[0];
    let dice_val = tape.value(dice).data()[0];
    let mut grads = tape.backward(total);
    let pairs = binder.collect(&mut grads);
    Ok((loss_val, ce_val, dice_val, pairs))
}

/// Train from scratch on a dataset; deterministic given the config seeds.
/// `on_record` receives one record per iteration (for the loss log).
pub fn train(
    dataset: &SyntheticDataset,
    cfg: &RunConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = init_model_params(&cfg.model);
    let mut opt = AdamW::new(&store);
    let mut rng = Rng::seed_from(cfg.train.seed);
    let total_iters = cfg.train.iterations;
    for it in 0..total_iters {
        let frac = it as f64 / total_iters.max(1) as f64;
        let lr = cfg.train.lr
            * if frac >= cfg.train.lr_decay_at {
                cfg.train.lr_decay_factor
            } else {
                1.0
            };
        let mut acc: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut dice_sum = 0.0;
        for _ in 0..cfg.train.batch_size {
            let clip = sample_training_clip(dataset, it, &cfg.train, &mut rng)?;
            let (loss, ce, dice, grads) = clip_backward(dataset, &clip, cfg, &store, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss} at iteration {it} (seq {}, frames {:?})",
                    clip.seq_index, clip.frame_indices
                )));
            }
            loss_sum += loss;
            ce_sum += ce;
            dice_sum += dice;
            for (idx, g) in grads {
                acc.entry(idx)
                    .and_modify(|t| {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    })
                    .or_insert(g);
            }
        }
        let inv = 1.0 / cfg.train.batch_size as f64;
        let averaged: Vec<(usize, Tensor)> = acc
            .into_iter()
            .map(|(idx, g)| (idx, g.scale(inv)))
            .collect();
        opt.step(&mut store, &averaged, lr, cfg.train.weight_decay);
        on_record(&TrainRecord {
            iteration: it,
            loss: loss_sum * inv,
            ce: ce_sum * inv,
            dice: dice_sum * inv,
            lr,
        });
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::synth::generate_synthetic;

    fn tiny_setup() -> (SyntheticDataset, RunConfig) {
        let data = DataConfig {
            num_sequences: 2,
            frames_per_seq: 10,
            height: 32,
            width: 32,
            num_objects: 2,
            seed: 5,
            ..DataConfig::default()
        };
        let ds = generate_synthetic(&data).unwrap();
        let mut cfg = crate::pipeline::testutil::tiny_run_config();
        cfg.data = data;
        cfg.train.iterations = 3;
        cfg.train.num_frames = 4;
        cfg.train.batch_size = 1;
        cfg.train.lr = 1e-3;
        cfg.train.seed = 21;
        (ds, cfg)
    }

    #[test]
    fn short_training_runs_and_is_deterministic() {
        let (ds, cfg) = tiny_setup();
        let mut records_a = Vec::new();
        let a = train(&ds, &cfg, |r| records_a.push(*r)).unwrap();
        let mut records_b = Vec::new();
        let b = train(&ds, &cfg, |r| records_b.push(*r)).unwrap();
        assert_eq!(records_a.len(), 3);
        for (ra, rb) in records_a.iter().zip(&records_b) {
            assert!(ra.loss.is_finite());
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits(), "loss determinism");
        }
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.tensor, eb.tensor, "checkpoint determinism: {}", ea.name);
        }
    }

    #[test]
    fn vit_stays_frozen_under_training() {
        let (ds, cfg) = tiny_setup();
        let before = init_model_params(&cfg.model);
        let after = train(&ds, &cfg, |_| {}).unwrap();
        let mut stem_changed = false;
        for (a, b) in before.entries().iter().zip(after.entries()) {
            if a.name.starts_with("vit.") {
                assert_eq!(a.tensor, b.tensor, "{} must stay frozen", a.name);
            }
            if a.name.starts_with("stem.") && a.tensor != b.tensor {
                stem_changed = true;
            }
        }
        assert!(stem_changed, "trainable stem parameters should move");
    }

    #[test]
    fn adamw_decays_matrices_only() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2, 2], 1.0), true);
        store.insert("b", Tensor::full(&[2], 1.0), true);
        let mut opt = AdamW::new(&store);
        // Zero gradients: the only update is the decoupled decay.
        let grads = alloc::vec![
            (0usize, Tensor::zeros(&[2, 2])),
            (1usize, Tensor::zeros(&[2])),
        ];
        opt.step(&mut store, &grads, 0.1, 0.5);
        assert!(store.get("w").unwrap().data()[0] < 1.0);
        assert_eq!(store.get("b").unwrap().data()[0], 1.0);
    }
}
