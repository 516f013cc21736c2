//! Run configuration: model dimensions, training schedule, synthetic-data
//! settings and ablation switches, with the flat dotted-key text format
//! used by config files and checkpoint snapshots.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Common width C of the multi-scale features.
    pub channels: usize,
    pub vit_depth: usize,
    pub vit_width: usize,
    pub vit_patch: usize,
    pub vit_heads: usize,
    /// A spatial-semantic block taps the ViT every this many layers.
    pub vit_tap_every: usize,
    /// Number of stacked spatial-semantic blocks.
    pub num_blocks: usize,
    /// Object queries per target.
    pub num_queries: usize,
    /// Query-transformer depth.
    pub query_depth: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    /// Pixel-memory key width.
    pub key_dim: usize,
    /// Pixel-memory value width.
    pub value_dim: usize,
    /// Top-K filter size for memory readout.
    pub top_k: usize,
    /// Pixel-memory capacity in entries.
    pub mem_capacity: usize,
    /// Memory update interval r (write every r-th frame).
    pub mem_interval: usize,
    /// Expansion ratio of the convolutional feed-forward.
    pub ffn_expand: usize,
    /// Seed for parameter initialization (including the frozen ViT).
    pub param_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            vit_depth: 12,
            vit_width: 64,
            vit_patch: 16,
            vit_heads: 4,
            vit_tap_every: 3,
            num_blocks: 4,
            num_queries: 8,
            query_depth: 5,
            deform_heads: 4,
            deform_points: 4,
            key_dim: 32,
            value_dim: 64,
            top_k: 30,
            mem_capacity: 8,
            mem_interval: 5,
            ffn_expand: 2,
            param_seed: 17,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationConfig {
    pub disable_semantic_embed: bool,
    pub disable_spatial_modeling: bool,
    pub disable_discriminative_query: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub num_frames: usize,
    pub num_ref_frames: usize,
    pub max_objects: usize,
    pub max_skip: Vec<usize>,
    /// Fractions of the iteration budget at which the max-skip advances;
    /// strictly increasing, last entry 1.0.
    pub max_skip_milestones: Vec<f64>,
    /// Fraction of pixels the loss is evaluated on (point supervision).
    pub point_fraction: f64,
    /// Step-decay: multiply the lr by `lr_decay_factor` at this fraction.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub flip_prob: f64,
    pub color_jitter: f64,
    pub grayscale_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            weight_decay: 0.05,
            iterations: 2000,
            batch_size: 1,
            num_frames: 8,
            num_ref_frames: 3,
            max_objects: 3,
            max_skip: vec![5, 10, 15, 5],
            max_skip_milestones: vec![0.1, 0.3, 0.8, 1.0],
            point_fraction: 0.25,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            flip_prob: 0.5,
            color_jitter: 0.05,
            grayscale_prob: 0.05,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Random shapes with linear motion and wall bounce.
    Mixed,
    /// Two similar objects swap sides.
    Crossing,
    /// One object passes behind another.
    Occlusion,
    /// An unlabeled occluder splits an object into two visible parts.
    PartSplit,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Mixed => "mixed",
            Scenario::Crossing => "crossing",
            Scenario::Occlusion => "occlusion",
            Scenario::PartSplit => "part_split",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Scenario::Mixed),
            "crossing" => Ok(Scenario::Crossing),
            "occlusion" => Ok(Scenario::Occlusion),
            "part_split" => Ok(Scenario::PartSplit),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (mixed|crossing|occlusion|part_split)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_sequences: usize,
    pub frames_per_seq: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub scenario: Scenario,
    pub speed_min: f64,
    pub speed_max: f64,
    pub overlap_allowed: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_sequences: 8,
            frames_per_seq: 24,
            height: 64,
            width: 64,
            num_objects: 2,
            scenario: Scenario::Mixed,
            speed_min: 0.5,
            speed_max: 2.5,
            overlap_allowed: true,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|p| parse_f64(key, p.trim())).collect()
}

fn fmt_usize_list(xs: &[usize]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    parts.join(",")
}

fn fmt_f64_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x}")).collect();
    parts.join(",")
}

impl RunConfig {
    /// Apply one dotted key/value pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.channels" => self.model.channels = parse_usize(key, v)?,
            "model.vit_depth" => self.model.vit_depth = parse_usize(key, v)?,
            "model.vit_width" => self.model.vit_width = parse_usize(key, v)?,
            "model.vit_patch" => self.model.vit_patch = parse_usize(key, v)?,
            "model.vit_heads" => self.model.vit_heads = parse_usize(key, v)?,
            "model.vit_tap_every" => self.model.vit_tap_every = parse_usize(key, v)?,
            "model.num_blocks" => self.model.num_blocks = parse_usize(key, v)?,
            "model.num_queries" => self.model.num_queries = parse_usize(key, v)?,
            "model.query_depth" => self.model.query_depth = parse_usize(key, v)?,
            "model.deform_heads" => self.model.deform_heads = parse_usize(key, v)?,
            "model.deform_points" => self.model.deform_points = parse_usize(key, v)?,
            "model.key_dim" => self.model.key_dim = parse_usize(key, v)?,
            "model.value_dim" => self.model.value_dim = parse_usize(key, v)?,
            "model.top_k" => self.model.top_k = parse_usize(key, v)?,
            "model.mem_capacity" => self.model.mem_capacity = parse_usize(key, v)?,
            "model.mem_interval" => self.model.mem_interval = parse_usize(key, v)?,
            "model.ffn_expand" => self.model.ffn_expand = parse_usize(key, v)?,
            "model.param_seed" => self.model.param_seed = parse_u64(key, v)?,
            "train.lr" => self.train.lr = parse_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(key, v)?,
            "train.iterations" => self.train.iterations = parse_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_usize(key, v)?,
            "train.num_frames" => self.train.num_frames = parse_usize(key, v)?,
            "train.num_ref_frames" => self.train.num_ref_frames = parse_usize(key, v)?,
            "train.max_objects" => self.train.max_objects = parse_usize(key, v)?,
            "train.max_skip" => self.train.max_skip = parse_usize_list(key, v)?,
            "train.max_skip_milestones" => {
                self.train.max_skip_milestones = parse_f64_list(key, v)?
            }
            "train.point_fraction" => self.train.point_fraction = parse_f64(key, v)?,
            "train.lr_decay_at" => self.train.lr_decay_at = parse_f64(key, v)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse_f64(key, v)?,
            "train.flip_prob" => self.train.flip_prob = parse_f64(key, v)?,
            "train.color_jitter" => self.train.color_jitter = parse_f64(key, v)?,
            "train.grayscale_prob" => self.train.grayscale_prob = parse_f64(key, v)?,
            "train.seed" => self.train.seed = parse_u64(key, v)?,
            "data.num_sequences" => self.data.num_sequences = parse_usize(key, v)?,
            "data.frames_per_seq" => self.data.frames_per_seq = parse_usize(key, v)?,
            "data.height" => self.data.height = parse_usize(key, v)?,
            "data.width" => self.data.width = parse_usize(key, v)?,
            "data.num_objects" => self.data.num_objects = parse_usize(key, v)?,
            "data.scenario" => self.data.scenario = Scenario::parse(v)?,
            "data.speed_min" => self.data.speed_min = parse_f64(key, v)?,
            "data.speed_max" => self.data.speed_max = parse_f64(key, v)?,
            "data.overlap_allowed" => self.data.overlap_allowed = parse_bool(key, v)?,
            "data.seed" => self.data.seed = parse_u64(key, v)?,
            "ablate.disable_semantic_embed" => {
                self.ablation.disable_semantic_embed = parse_bool(key, v)?
            }
            "ablate.disable_spatial_modeling" => {
                self.ablation.disable_spatial_modeling = parse_bool(key, v)?
            }
            "ablate.disable_discriminative_query" => {
                self.ablation.disable_discriminative_query = parse_bool(key, v)?
            }
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a config document: one `key=value` per line, `#` comments.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Canonical flat rendering; stable key order, round-trips through
    /// [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let a = &self.ablation;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("model.channels", m.channels.to_string());
        kv("model.vit_depth", m.vit_depth.to_string());
        kv("model.vit_width", m.vit_width.to_string());
        kv("model.vit_patch", m.vit_patch.to_string());
        kv("model.vit_heads", m.vit_heads.to_string());
        kv("model.vit_tap_every", m.vit_tap_every.to_string());
        kv("model.num_blocks", m.num_blocks.to_string());
        kv("model.num_queries", m.num_queries.to_string());
        kv("model.query_depth", m.query_depth.to_string());
        kv("model.deform_heads", m.deform_heads.to_string());
        kv("model.deform_points", m.deform_points.to_string());
        kv("model.key_dim", m.key_dim.to_string());
        kv("model.value_dim", m.value_dim.to_string());
        kv("model.top_k", m.top_k.to_string());
        kv("model.mem_capacity", m.mem_capacity.to_string());
        kv("model.mem_interval", m.mem_interval.to_string());
        kv("model.ffn_expand", m.ffn_expand.to_string());
        kv("model.param_seed", m.param_seed.to_string());
        kv("train.lr", format!("{}", t.lr));
        kv("train.weight_decay", format!("{}", t.weight_decay));
        kv("train.iterations", t.iterations.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.num_frames", t.num_frames.to_string());
        kv("train.num_ref_frames", t.num_ref_frames.to_string());
        kv("train.max_objects", t.max_objects.to_string());
        kv("train.max_skip", fmt_usize_list(&t.max_skip));
        kv("train.max_skip_milestones", fmt_f64_list(&t.max_skip_milestones));
        kv("train.point_fraction", format!("{}", t.point_fraction));
        kv("train.lr_decay_at", format!("{}", t.lr_decay_at));
        kv("train.lr_decay_factor", format!("{}", t.lr_decay_factor));
        kv("train.flip_prob", format!("{}", t.flip_prob));
        kv("train.color_jitter", format!("{}", t.color_jitter));
        kv("train.grayscale_prob", format!("{}", t.grayscale_prob));
        kv("train.seed", t.seed.to_string());
        kv("data.num_sequences", d.num_sequences.to_string());
        kv("data.frames_per_seq", d.frames_per_seq.to_string());
        kv("data.height", d.height.to_string());
        kv("data.width", d.width.to_string());
        kv("data.num_objects", d.num_objects.to_string());
        kv("data.scenario", d.scenario.as_str().to_string());
        kv("data.speed_min", format!("{}", d.speed_min));
        kv("data.speed_max", format!("{}", d.speed_max));
        kv("data.overlap_allowed", d.overlap_allowed.to_string());
        kv("data.seed", d.seed.to_string());
        kv(
            "ablate.disable_semantic_embed",
            a.disable_semantic_embed.to_string(),
        );
        kv(
            "ablate.disable_spatial_modeling",
            a.disable_spatial_modeling.to_string(),
        );
        kv(
            "ablate.disable_discriminative_query",
            a.disable_discriminative_query.to_string(),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels == 0 || m.channels % m.deform_heads != 0 {
            return Err(Error::Config(format!(
                "model.channels {} must be a positive multiple of deform_heads {}",
                m.channels, m.deform_heads
            )));
        }
        if m.vit_width % m.vit_heads != 0 {
            return Err(Error::Config("model.vit_width must divide by vit_heads".into()));
        }
        if m.vit_tap_every == 0 || m.num_blocks * m.vit_tap_every > m.vit_depth {
            return Err(Error::Config(format!(
                "{} blocks tapping every {} layers exceed ViT depth {}",
                m.num_blocks, m.vit_tap_every, m.vit_depth
            )));
        }
        if m.num_queries == 0 || m.query_depth == 0 {
            return Err(Error::Config("query counts must be positive".into()));
        }
        if m.mem_capacity == 0 || m.mem_interval == 0 || m.top_k == 0 {
            return Err(Error::Config("memory settings must be positive".into()));
        }
        let t = &self.train;
        if t.max_skip.len() != t.max_skip_milestones.len() || t.max_skip.is_empty() {
            return Err(Error::Config(
                "train.max_skip and train.max_skip_milestones must have equal nonzero length"
                    .into(),
            ));
        }
        let ms = &t.max_skip_milestones;
        for w in ms.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("milestones must be strictly increasing".into()));
            }
        }
        if (ms[ms.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::Config("last milestone must be 1.0".into()));
        }
        if !(0.0..=1.0).contains(&t.point_fraction) || t.point_fraction == 0.0 {
            return Err(Error::Config("train.point_fraction must be in (0,1]".into()));
        }
        if t.num_frames < 2 {
            return Err(Error::Config("train.num_frames must be at least 2".into()));
        }
        if t.max_objects == 0 || t.max_objects > 3 {
            return Err(Error::Config("train.max_objects must be 1..=3".into()));
        }
        let d = &self.data;
        if d.num_objects == 0 || d.num_objects > 3 {
            return Err(Error::Config("data.num_objects must be 1..=3 (at most 3 targets)".into()));
        }
        if d.height < 16 || d.width < 16 {
            return Err(Error::Config("data.height/width must be at least 16".into()));
        }
        if d.speed_min < 0.0 || d.speed_max < d.speed_min {
            return Err(Error::Config("data speed range invalid".into()));
        }
        Ok(())
    }
}
