//! Integer label masks: 0 = background, 1..K = object identities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// H×W label map with a display palette (index = object id).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    labels: Vec<u8>,
    pub palette: Vec<[u8; 3]>,
}

/// PASCAL-VOC style color for a label index (id 0 is black).
pub fn palette_color(index: usize) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut id = index;
    let mut shift = 7i32;
    while id > 0 && shift >= 0 {
        for (bit, ch) in c.iter_mut().enumerate() {
            *ch |= (((id >> bit) & 1) as u8) << shift;
        }
        id >>= 3;
        shift -= 1;
    }
    c
}

/// Default 256-entry palette.
pub fn default_palette() -> Vec<[u8; 3]> {
    (0..256).map(palette_color).collect()
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label data {} != {h}x{w}",
                labels.len()
            )));
        }
        Ok(LabelMask { h, w, labels, palette: default_palette() })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        LabelMask { h, w, labels: vec![0; h * w], palette: default_palette() }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.w + x] = v;
    }

    /// Sorted object ids present (background excluded).
    pub fn ids_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..256).filter(|&i| seen[i]).map(|i| i as u8).collect()
    }

    /// Binary slice of one object id.
    pub fn binary(&self, id: u8) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l == id)).collect()
    }

    /// Union of all listed ids except `id`.
    pub fn binary_others(&self, id: u8, ids: &[u8]) -> Vec<u8> {
        self.labels
            .iter()
            .map(|&l| u8::from(l != id && ids.contains(&l)))
            .collect()
    }

    pub fn count(&self, id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    /// Zero-pad right/bottom.
    pub fn padded(&self, h2: usize, w2: usize) -> LabelMask {
        assert!(h2 >= self.h && w2 >= self.w);
        let mut out = LabelMask::zeros(h2, w2);
        out.palette = self.palette.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(y, x));
            }
        }
        out
    }

    /// Crop to the top-left (h2, w2) window.
    pub fn cropped(&self, h2: usize, w2: usize) -> LabelMask {
        assert!(h2 <= self.h && w2 <= self.w);
        let mut out = LabelMask::zeros(h2, w2);
        out.palette = self.palette.clone();
        for y in 0..h2 {
            for x in 0..w2 {
                out.set(y, x, self.get(y, x));
            }
        }
        out
    }

    pub fn horizontal_flip(&self) -> LabelMask {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(y, self.w - 1 - x));
            }
        }
        out
    }
}

/// Max-pool a binary mask down to a stride grid: a cell is 1 when any
/// covered pixel is 1. `h`/`w` must divide by `stride`.
pub fn maxpool_mask(bits: &[u8], h: usize, w: usize, stride: usize) -> Vec<u8> {
    assert_eq!(bits.len(), h * w);
    assert!(h % stride == 0 && w % stride == 0, "mask {h}x{w} not divisible by {stride}");
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0u8; oh * ow];
    for y in 0..h {
        for x in 0..w {
            if bits[y * w + x] != 0 {
                out[(y / stride) * ow + x / stride] = 1;
            }
        }
    }
    out
}
