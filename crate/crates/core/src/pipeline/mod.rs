//! End-to-end multi-object pipeline: padding, per-object decoding, soft
//! aggregation, the inference session with its memory schedule, the
//! training loss and the training loop.

mod aggregate;
mod decode;
mod loss;
mod sample;
mod session;
mod train;

pub use aggregate::{soft_aggregate, soft_aggregate_probs_t};
pub use decode::{decode_t, init_decoder_params, DecoderVars};
pub use loss::{train_loss, train_loss_t, LossBreakdown};
pub use sample::{active_max_skip, augment_clip, sample_training_clip, ClipSpec};
pub use session::{frame_to_tensor, SequenceSession};
pub use train::{train, AdamW, TrainRecord};

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::mask::LabelMask;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Original (pre-padding) size; cropping back with it inverts the padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub h: usize,
    pub w: usize,
}

pub fn pad_dim_to_32(x: usize) -> usize {
    x.div_ceil(32) * 32
}

/// Zero-pad a frame and its masks right/bottom to multiples of 32.
pub fn pad_to_32(frame: &Tensor, masks: &[LabelMask]) -> (Tensor, Vec<LabelMask>, CropRecord) {
    assert_eq!(frame.dims().len(), 3, "frame must be (C,H,W)");
    let (c, h, w) = (frame.dims()[0], frame.dims()[1], frame.dims()[2]);
    let (ph, pw) = (pad_dim_to_32(h), pad_dim_to_32(w));
    let mut padded = Tensor::zeros(&[c, ph, pw]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                padded.set3(ci, y, x, frame.at3(ci, y, x));
            }
        }
    }
    let masks = masks.iter().map(|m| m.padded(ph, pw)).collect();
    (padded, masks, CropRecord { h, w })
}

/// Crop a padded label map back to the recorded size.
pub fn crop_mask(mask: &LabelMask, rec: CropRecord) -> LabelMask {
    mask.cropped(rec.h, rec.w)
}

/// Build the complete parameter store for a model configuration
/// (frozen ViT trunk plus all trainable modules), seeded deterministically.
pub fn init_model_params(cfg: &ModelConfig) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed_from(cfg.param_seed);
    crate::vit::init_vit_params(&mut store, cfg, &mut rng);
    crate::backbone::init_backbone_params(&mut store, cfg, &mut rng);
    crate::query::init_query_params(&mut store, cfg, &mut rng);
    crate::memory::init_memory_params(&mut store, cfg, &mut rng);
    decode::init_decoder_params(&mut store, cfg, &mut rng);
    store
}
