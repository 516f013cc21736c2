//! Synthetic moving-shapes sequences: the desk-scale stand-in for real
//! video datasets, with crafted scenario families (crossing, occlusion,
//! part-split) next to the generic mixed motion model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{DataConfig, Scenario};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 8-bit RGB image, HWC row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize) -> Self {
        RgbImage { h, w, data: vec![0; h * w * 3] }
    }

    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::Shape(format!("rgb data {} != {h}x{w}x3", data.len())));
        }
        Ok(RgbImage { h, w, data })
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// (3,H,W) tensor scaled to [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(&[3, self.h, self.w]);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = self.get(y, x);
                for c in 0..3 {
                    t.set3(c, y, x, px[c] as f64 / 255.0);
                }
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub annotations: Vec<LabelMask>,
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticDataset {
    pub sequences: Vec<VideoSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

#[derive(Clone, Debug)]
struct MovingShape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    /// Half-extent (disk radius, rectangle half-sides, triangle half-base).
    rx: f64,
    ry: f64,
    color: [f64; 3],
    /// 0 = unlabeled scene element (occluder), 1.. = object id.
    id: u8,
}

impl MovingShape {
    fn bound(&self) -> f64 {
        self.rx.max(self.ry)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ShapeKind::Disk => {
                let (nx, ny) = (dx / self.rx, dy / self.ry);
                nx * nx + ny * ny <= 1.0
            }
            ShapeKind::Rect => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Triangle => {
                // Upward triangle: apex (cx, cy-ry), base y = cy+ry.
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                let half_width_at = self.rx * (dy + self.ry) / (2.0 * self.ry);
                dx.abs() <= half_width_at
            }
        }
    }
}

fn pixel_hash(x: usize, y: usize, salt: u64) -> f64 {
    let mut h = salt
        ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn to_u8(v: f64) -> u8 {
    libm::round((v.clamp(0.0, 1.0)) * 255.0) as u8
}

fn render(
    shapes: &[MovingShape],
    cfg: &DataConfig,
    bg: &([f64; 3], [f64; 3]),
    noise_salt: u64,
) -> (RgbImage, LabelMask) {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = RgbImage::new(h, w);
    let mut mask = LabelMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64;
            let mut color = [
                bg.0[0] * (1.0 - fy) + bg.1[0] * fy,
                bg.0[1] * (1.0 - fy) + bg.1[1] * fy,
                bg.0[2] * (1.0 - fy) + bg.1[2] * fy,
            ];
            let noise = (pixel_hash(x, y, noise_salt) - 0.5) * 0.04;
            let mut label = 0u8;
            // Later shapes draw on top.
            for s in shapes {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    color = s.color;
                    label = s.id;
                }
            }
            for c in 0..3 {
                color[c] += noise;
            }
            img.set(y, x, [to_u8(color[0]), to_u8(color[1]), to_u8(color[2])]);
            mask.set(y, x, label);
        }
    }
    (img, mask)
}

fn step_shapes(shapes: &mut [MovingShape], cfg: &DataConfig) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    for s in shapes.iter_mut() {
        if s.vx == 0.0 && s.vy == 0.0 {
            continue;
        }
        let b = s.bound();
        let mut nx = s.cx + s.vx;
        let mut ny = s.cy + s.vy;
        if nx - b < 0.0 || nx + b > w {
            s.vx = -s.vx;
            nx = s.cx + s.vx;
        }
        if ny - b < 0.0 || ny + b > h {
            s.vy = -s.vy;
            ny = s.cy + s.vy;
        }
        s.cx = nx;
        s.cy = ny;
    }
    if !cfg.overlap_allowed {
        // Elastic velocity swap on bounding-circle contact.
        for i in 0..shapes.len() {
            for j in (i + 1)..shapes.len() {
                let dx = shapes[i].cx - shapes[j].cx;
                let dy = shapes[i].cy - shapes[j].cy;
                let dist = libm::sqrt(dx * dx + dy * dy);
                if dist < shapes[i].bound() + shapes[j].bound() {
                    let (vi, vj) = ((shapes[i].vx, shapes[i].vy), (shapes[j].vx, shapes[j].vy));
                    shapes[i].vx = vj.0;
                    shapes[i].vy = vj.1;
                    shapes[j].vx = vi.0;
                    shapes[j].vy = vi.1;
                    // Undo this step's motion to keep masks disjoint.
                    shapes[i].cx -= vj.0.abs().min(dx.abs()) * dx.signum();
                    shapes[i].cy -= vj.1.abs().min(dy.abs()) * dy.signum();
                }
            }
        }
    }
}

fn random_kind(rng: &mut Rng) -> ShapeKind {
    match rng.below(3) {
        0 => ShapeKind::Disk,
        1 => ShapeKind::Rect,
        _ => ShapeKind::Triangle,
    }
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    // Keep one strong channel so objects separate from the dark background.
    let mut c = [
        rng.uniform(0.25, 1.0),
        rng.uniform(0.25, 1.0),
        rng.uniform(0.25, 1.0),
    ];
    let strongest = rng.below(3);
    c[strongest] = rng.uniform(0.75, 1.0);
    c
}

fn place_disjoint(shapes: &[MovingShape], r: f64, cfg: &DataConfig, rng: &mut Rng) -> (f64, f64) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    for _ in 0..200 {
        let cx = rng.uniform(r + 1.0, w - r - 1.0);
        let cy = rng.uniform(r + 1.0, h - r - 1.0);
        let clear = shapes.iter().all(|s| {
            let dx = s.cx - cx;
            let dy = s.cy - cy;
            libm::sqrt(dx * dx + dy * dy) > s.bound() + r + 1.0
        });
        if clear {
            return (cx, cy);
        }
    }
    // Dense board: last resort, accept an overlap at t=0 margin.
    (w / 2.0, h / 2.0)
}

fn mixed_shapes(cfg: &DataConfig, rng: &mut Rng) -> Vec<MovingShape> {
    let min_side = cfg.height.min(cfg.width) as f64;
    let mut shapes: Vec<MovingShape> = Vec::new();
    for id in 1..=cfg.num_objects as u8 {
        let r = rng.uniform(0.11, 0.18) * min_side;
        let (cx, cy) = place_disjoint(&shapes, r, cfg, rng);
        let speed = rng.uniform(cfg.speed_min, cfg.speed_max);
        let angle = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
        shapes.push(MovingShape {
            kind: random_kind(rng),
            cx,
            cy,
            vx: speed * libm::cos(angle),
            vy: speed * libm::sin(angle),
            rx: r,
            ry: r * rng.uniform(0.8, 1.2),
            color: random_color(rng),
            id,
        });
    }
    shapes
}

fn crossing_shapes(cfg: &DataConfig, rng: &mut Rng) -> Vec<MovingShape> {
    // Two similar objects swap sides over the sequence.
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let r = 0.14 * h.min(w);
    let base = random_color(rng);
    let tweak = |c: [f64; 3], d: f64| [c[0] + d, c[1] - d, c[2] + d * 0.5];
    let kind = random_kind(rng);
    // Enough speed to swap x-order with margin.
    let travel = 0.55 * w;
    let v = travel / (cfg.frames_per_seq.max(2) - 1) as f64;
    let y0 = h * rng.uniform(0.4, 0.6);
    let dy = r * 0.6;
    vec![
        MovingShape {
            kind,
            cx: w * 0.22,
            cy: y0 - dy,
            vx: v,
            vy: 0.0,
            rx: r,
            ry: r,
            color: tweak(base, 0.04),
            id: 1,
        },
        MovingShape {
            kind,
            cx: w * 0.78,
            cy: y0 + dy,
            vx: -v,
            vy: 0.0,
            rx: r,
            ry: r,
            color: tweak(base, -0.04),
            id: 2,
        },
    ]
}

fn occlusion_shapes(cfg: &DataConfig, rng: &mut Rng) -> Vec<MovingShape> {
    // Object 1 passes behind static object 2 (later in the list draws on
    // top, so object 2 occludes).
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let r = 0.15 * h.min(w);
    let v = 0.6 * w / (cfg.frames_per_seq.max(2) - 1) as f64;
    vec![
        MovingShape {
            kind: random_kind(rng),
            cx: w * 0.18,
            cy: h * 0.5,
            vx: v,
            vy: 0.0,
            rx: r,
            ry: r,
            color: random_color(rng),
            id: 1,
        },
        MovingShape {
            kind: ShapeKind::Rect,
            cx: w * 0.5,
            cy: h * 0.5,
            vx: 0.0,
            vy: 0.0,
            rx: r * 0.8,
            ry: r * 1.4,
            color: random_color(rng),
            id: 2,
        },
    ]
}

fn part_split_shapes(cfg: &DataConfig, rng: &mut Rng) -> Vec<MovingShape> {
    // One labeled object crosses behind an unlabeled occluder bar that
    // splits it into two visible components.
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let r = 0.17 * h.min(w);
    let v = 0.55 * w / (cfg.frames_per_seq.max(2) - 1) as f64;
    vec![
        MovingShape {
            kind: ShapeKind::Rect,
            cx: w * 0.2,
            cy: h * 0.5,
            vx: v,
            vy: 0.0,
            rx: r * 1.3,
            ry: r * 0.8,
            color: random_color(rng),
            id: 1,
        },
        MovingShape {
            kind: ShapeKind::Rect,
            cx: w * 0.5,
            cy: h * 0.5,
            vx: 0.0,
            vy: 0.0,
            rx: r * 0.22,
            ry: h * 0.5,
            color: [0.12, 0.12, 0.14],
            id: 0,
        },
    ]
}

/// Generate a deterministic synthetic dataset in memory.
pub fn generate_synthetic(cfg: &DataConfig) -> Result<SyntheticDataset> {
    if cfg.num_objects == 0 || cfg.num_objects > 3 {
        return Err(Error::Config("num_objects must be 1..=3 (at most 3 targets)".into()));
    }
    if cfg.frames_per_seq < 2 {
        return Err(Error::Config("frames_per_seq must be at least 2".into()));
    }
    let mut rng = Rng::seed_from(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    for si in 0..cfg.num_sequences {
        let mut seq_rng = rng.fork();
        let mut shapes = match cfg.scenario {
            Scenario::Mixed => mixed_shapes(cfg, &mut seq_rng),
            Scenario::Crossing => crossing_shapes(cfg, &mut seq_rng),
            Scenario::Occlusion => occlusion_shapes(cfg, &mut seq_rng),
            Scenario::PartSplit => part_split_shapes(cfg, &mut seq_rng),
        };
        let bg = (
            [
                seq_rng.uniform(0.02, 0.2),
                seq_rng.uniform(0.02, 0.2),
                seq_rng.uniform(0.02, 0.2),
            ],
            [
                seq_rng.uniform(0.02, 0.25),
                seq_rng.uniform(0.02, 0.25),
                seq_rng.uniform(0.02, 0.25),
            ],
        );
        let noise_salt = seq_rng.next_u64();
        let mut frames = Vec::with_capacity(cfg.frames_per_seq);
        let mut annotations = Vec::with_capacity(cfg.frames_per_seq);
        for f in 0..cfg.frames_per_seq {
            if f > 0 {
                step_shapes(&mut shapes, cfg);
            }
            let (img, mask) = render(&shapes, cfg, &bg, noise_salt);
            frames.push(img);
            annotations.push(mask);
        }
        sequences.push(VideoSequence {
            name: format!("seq_{si:04}"),
            frames,
            annotations,
        });
    }
    Ok(SyntheticDataset { sequences })
}

/// Centroid of one object's mask pixels, if present.
pub fn mask_centroid(mask: &LabelMask, id: u8) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) == id {
                n += 1;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((sx / n as f64, sy / n as f64))
    }
}
