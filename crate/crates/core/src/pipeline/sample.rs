//! Training clip sampling with the max-skip curriculum, plus the per-clip
//! augmentation (horizontal flip, color jitter, grayscale — applied
//! consistently across the whole clip).

use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::Rng;
use crate::synth::SyntheticDataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSpec {
    pub seq_index: usize,
    /// Sorted frame indices, `num_frames` of them.
    pub frame_indices: Vec<usize>,
    /// Chosen object ids (at most `max_objects`).
    pub object_ids: Vec<u8>,
}

/// Max-skip active at this point of the schedule: entry i applies while
/// the completed fraction is below milestone i.
pub fn active_max_skip(iteration: usize, total_iterations: usize, cfg: &TrainConfig) -> usize {
    let frac = if total_iterations == 0 {
        0.0
    } else {
        iteration as f64 / total_iterations as f64
    };
    for (skip, &milestone) in cfg.max_skip.iter().zip(&cfg.max_skip_milestones) {
        if frac < milestone {
            return *skip;
        }
    }
    *cfg.max_skip.last().expect("validated nonempty")
}

const MAX_ATTEMPTS: usize = 500;

/// Sample one training clip: a seed frame containing at least one target,
/// `num_frames - 1` companions from the same video with every consecutive
/// gap bounded by the active max-skip, and at most `max_objects` targets
/// visible in the seed; the clip's first frame must contain a chosen
/// target (it initializes the session).
pub fn sample_training_clip(
    dataset: &SyntheticDataset,
    iteration: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<ClipSpec> {
    let skip = active_max_skip(iteration, cfg.iterations, cfg);
    let candidates: Vec<usize> = dataset
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.frames.len() >= cfg.num_frames)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Train(alloc::format!(
            "no sequence has {} frames",
            cfg.num_frames
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let seq_index = candidates[rng.below(candidates.len())];
        let seq = &dataset.sequences[seq_index];
        let total = seq.frames.len();

        // Seed frame must contain at least one object.
        let seed = rng.below(total);
        let seed_ids = seq.annotations[seed].ids_present();
        if seed_ids.is_empty() {
            continue;
        }
        let mut object_ids = seed_ids;
        rng.shuffle(&mut object_ids);
        object_ids.truncate(cfg.max_objects);
        object_ids.sort_unstable();

        // Companion frames, uniform without replacement.
        let mut pool: Vec<usize> = (0..total).filter(|&f| f != seed).collect();
        rng.shuffle(&mut pool);
        let mut frames: Vec<usize> = pool.into_iter().take(cfg.num_frames - 1).collect();
        frames.push(seed);
        frames.sort_unstable();
        if frames.windows(2).any(|w| w[1] - w[0] > skip) {
            continue;
        }
        // The first frame initializes the session with ground truth.
        let first_ids = seq.annotations[frames[0]].ids_present();
        if !object_ids.iter().any(|id| first_ids.contains(id)) {
            continue;
        }
        return Ok(ClipSpec { seq_index, frame_indices: frames, object_ids });
    }
    Err(Error::Train(
        "could not sample a clip satisfying the max-skip constraint".into(),
    ))
}

/// Per-clip augmentation: one coin per clip for flip and grayscale, one
/// jitter draw per channel, all applied to every frame identically.
/// Frames are (3,H,W) in [0,1]; masks flip alongside.
pub fn augment_clip(
    frames: &mut [Tensor],
    masks: &mut [LabelMask],
    cfg: &TrainConfig,
    rng: &mut Rng,
) {
    let flip = rng.bernoulli(cfg.flip_prob);
    let gray = rng.bernoulli(cfg.grayscale_prob);
    let j = cfg.color_jitter;
    let gains = [
        rng.uniform(1.0 - j, 1.0 + j),
        rng.uniform(1.0 - j, 1.0 + j),
        rng.uniform(1.0 - j, 1.0 + j),
    ];
    let offsets = [
        rng.uniform(-j, j),
        rng.uniform(-j, j),
        rng.uniform(-j, j),
    ];
    for frame in frames.iter_mut() {
        let (c, h, w) = (frame.dims()[0], frame.dims()[1], frame.dims()[2]);
        debug_assert_eq!(c, 3);
        if flip {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w / 2 {
                        let a = frame.at3(ch, y, x);
                        let b = frame.at3(ch, y, w - 1 - x);
                        frame.set3(ch, y, x, b);
                        frame.set3(ch, y, w - 1 - x, a);
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut px = [0.0; 3];
                for ch in 0..3 {
                    px[ch] = (frame.at3(ch, y, x) * gains[ch] + offsets[ch]).clamp(0.0, 1.0);
                }
                if gray {
                    let lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                    px = [lum, lum, lum];
                }
                for ch in 0..3 {
                    frame.set3(ch, y, x, px[ch]);
                }
            }
        }
    }
    if flip {
        for m in masks.iter_mut() {
            *m = m.horizontal_flip();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::synth::generate_synthetic;

    fn dataset() -> SyntheticDataset {
        generate_synthetic(&DataConfig {
            num_sequences: 3,
            frames_per_seq: 30,
            height: 32,
            width: 32,
            num_objects: 2,
            ..DataConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn skip_schedule_matches_milestones() {
        let cfg = TrainConfig { iterations: 1000, ..TrainConfig::default() };
        assert_eq!(active_max_skip(50, 1000, &cfg), 5); // 5% of budget
        assert_eq!(active_max_skip(200, 1000, &cfg), 10);
        assert_eq!(active_max_skip(500, 1000, &cfg), 15); // 50% of budget
        assert_eq!(active_max_skip(900, 1000, &cfg), 5);
    }

    #[test]
    fn sampled_clips_respect_constraints() {
        let ds = dataset();
        let cfg = TrainConfig { iterations: 1000, ..TrainConfig::default() };
        let mut rng = Rng::seed_from(3);
        for it in (0..1000).step_by(37) {
            let clip = sample_training_clip(&ds, it, &cfg, &mut rng).unwrap();
            assert_eq!(clip.frame_indices.len(), cfg.num_frames);
            let skip = active_max_skip(it, cfg.iterations, &cfg);
            for w in clip.frame_indices.windows(2) {
                assert!(w[1] - w[0] <= skip, "gap {} > {skip}", w[1] - w[0]);
                assert!(w[1] > w[0], "frames must be distinct and sorted");
            }
            assert!(!clip.object_ids.is_empty());
            assert!(clip.object_ids.len() <= cfg.max_objects);
            let first = &ds.sequences[clip.seq_index].annotations[clip.frame_indices[0]];
            assert!(clip.object_ids.iter().any(|&id| first.count(id) > 0));
        }
    }

    #[test]
    fn too_short_sequences_rejected() {
        let ds = generate_synthetic(&DataConfig {
            num_sequences: 1,
            frames_per_seq: 4,
            height: 32,
            width: 32,
            ..DataConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig::default(); // wants 8 frames
        let mut rng = Rng::seed_from(1);
        assert!(sample_training_clip(&ds, 0, &cfg, &mut rng).is_err());
    }

    #[test]
    fn augmentation_is_consistent_across_the_clip() {
        let ds = dataset();
        let seq = &ds.sequences[0];
        let mut frames: Vec<Tensor> = seq.frames[..4].iter().map(|f| f.to_tensor()).collect();
        let mut masks: Vec<LabelMask> = seq.annotations[..4].to_vec();
        let cfg = TrainConfig { flip_prob: 1.0, grayscale_prob: 0.0, color_jitter: 0.0, ..TrainConfig::default() };
        let mut rng = Rng::seed_from(5);
        let orig_mask0 = masks[0].clone();
        augment_clip(&mut frames, &mut masks, &cfg, &mut rng);
        // Flip applied to every frame and mask.
        assert_eq!(masks[0], orig_mask0.horizontal_flip());
        for (f, m) in frames.iter().zip(&masks) {
            assert_eq!(f.dims(), &[3, 32, 32]);
            assert_eq!(m.h, 32);
        }
        // Grayscale collapses channels identically everywhere.
        let mut frames2: Vec<Tensor> = seq.frames[..2].iter().map(|f| f.to_tensor()).collect();
        let mut masks2: Vec<LabelMask> = seq.annotations[..2].to_vec();
        let cfg2 = TrainConfig { flip_prob: 0.0, grayscale_prob: 1.0, color_jitter: 0.0, ..TrainConfig::default() };
        augment_clip(&mut frames2, &mut masks2, &cfg2, &mut Rng::seed_from(6));
        for f in &frames2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(f.at3(0, y, x), f.at3(1, y, x));
                    assert_eq!(f.at3(1, y, x), f.at3(2, y, x));
                }
            }
        }
    }
}
