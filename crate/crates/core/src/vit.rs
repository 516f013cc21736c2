//! Frozen toy ViT trunk.
//!
//! Random-initialized, seeded from the run config and never trained, so the
//! whole forward pass runs on plain tensors outside the autodiff tape: its
//! outputs enter the trainable graph as constants and receive zero gradient
//! by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{linear_init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Patch tokens and CLS token captured after each tapped layer.
#[derive(Clone, Debug)]
pub struct VitTap {
    /// (Hp·Wp, Cvit)
    pub patch_tokens: Tensor,
    /// (1, Cvit)
    pub cls_token: Tensor,
}

#[derive(Clone, Debug)]
pub struct VitState {
    pub taps: Vec<VitTap>,
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
    /// Always true: the trunk never trains.
    pub frozen: bool,
}

/// Layer-indexed parameter names live under `vit.`; everything is stored
/// frozen (trainable = false).
pub fn init_vit_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    let c = cfg.vit_width;
    let patch_dim = 3 * cfg.vit_patch * cfg.vit_patch;
    store.insert("vit.patch_embed.w", linear_init(patch_dim, c, rng), false);
    store.insert("vit.patch_embed.b", Tensor::zeros(&[1, c]), false);
    store.insert("vit.cls", Tensor::randn(&[1, c], 0.5, rng), false);
    for l in 0..cfg.vit_depth {
        let p = |suffix: &str| -> String { format!("vit.layer{l}.{suffix}") };
        store.insert(&p("ln1.gamma"), Tensor::full(&[1, c], 1.0), false);
        store.insert(&p("ln1.beta"), Tensor::zeros(&[1, c]), false);
        store.insert(&p("attn.wq"), linear_init(c, c, rng), false);
        store.insert(&p("attn.wk"), linear_init(c, c, rng), false);
        store.insert(&p("attn.wv"), linear_init(c, c, rng), false);
        store.insert(&p("attn.wo"), linear_init(c, c, rng), false);
        store.insert(&p("ln2.gamma"), Tensor::full(&[1, c], 1.0), false);
        store.insert(&p("ln2.beta"), Tensor::zeros(&[1, c]), false);
        store.insert(&p("mlp.w1"), linear_init(c, 4 * c, rng), false);
        store.insert(&p("mlp.b1"), Tensor::zeros(&[1, 4 * c]), false);
        store.insert(&p("mlp.w2"), linear_init(4 * c, c, rng), false);
        store.insert(&p("mlp.b2"), Tensor::zeros(&[1, c]), false);
    }
}

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / libm::sqrt(var + 1e-6);
        for j in 0..n {
            out.set2(i, j, gamma.at2(0, j) * (row[j] - mean) * inv + beta.at2(0, j));
        }
    }
    out
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    Tensor::from_fn(&[m, n], |i| x.data()[i] + b.at2(0, i % n))
}

fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2)))
}

/// Multi-head self-attention over a token sequence (L, C).
pub fn mha_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Tensor {
    let (l, c) = (x.rows(), x.cols());
    let dh = c / heads;
    let q = x.matmul(wq);
    let k = x.matmul(wk);
    let v = x.matmul(wv);
    let mut merged = Tensor::zeros(&[l, c]);
    let scale = 1.0 / libm::sqrt(dh as f64);
    for h in 0..heads {
        let off = h * dh;
        for i in 0..l {
            // Row-wise softmax over this head's scores.
            let mut scores = Vec::with_capacity(l);
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..l {
                let mut s = 0.0;
                for d in 0..dh {
                    s += q.at2(i, off + d) * k.at2(j, off + d);
                }
                s *= scale;
                maxv = maxv.max(s);
                scores.push(s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = libm::exp(*s - maxv);
                sum += *s;
            }
            for d in 0..dh {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += scores[j] / sum * v.at2(j, off + d);
                }
                merged.set2(i, off + d, acc);
            }
        }
    }
    merged.matmul(wo)
}

/// Fixed 2-d sinusoidal positional encoding, (h·w, c) with the x position
/// in the first half of the channels and y in the second.
pub fn sinusoidal_pe_2d(h: usize, w: usize, c: usize) -> Tensor {
    assert!(c % 4 == 0, "positional encoding needs channels divisible by 4");
    let quarter = c / 4;
    let mut pe = Tensor::zeros(&[h * w, c]);
    for r in 0..h {
        for col in 0..w {
            let idx = r * w + col;
            for i in 0..quarter {
                let freq = libm::pow(10000.0, -(i as f64) / quarter as f64);
                pe.set2(idx, 2 * i, libm::sin(col as f64 * freq));
                pe.set2(idx, 2 * i + 1, libm::cos(col as f64 * freq));
                pe.set2(idx, c / 2 + 2 * i, libm::sin(r as f64 * freq));
                pe.set2(idx, c / 2 + 2 * i + 1, libm::cos(r as f64 * freq));
            }
        }
    }
    pe
}

/// Cut a padded (3,H,W) frame into flattened patch rows (Hp·Wp, 3·P·P).
fn patchify(frame: &Tensor, patch: usize) -> Tensor {
    let (ch, h, w) = (frame.dims()[0], frame.dims()[1], frame.dims()[2]);
    let (hp, wp) = (h / patch, w / patch);
    let mut out = Tensor::zeros(&[hp * wp, ch * patch * patch]);
    for py in 0..hp {
        for px in 0..wp {
            let row = py * wp + px;
            let mut col = 0;
            for c in 0..ch {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out.set2(row, col, frame.at3(c, py * patch + dy, px * patch + dx));
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Forward the frozen trunk, recording patch and CLS tokens after every
/// tapped layer (layers `tap_every, 2·tap_every, ...`).
pub fn vit_forward(frame: &Tensor, store: &ParamStore, cfg: &ModelConfig) -> Result<VitState> {
    if frame.dims().len() != 3 || frame.dims()[0] != 3 {
        return Err(Error::Shape(format!("frame must be (3,H,W), got {:?}", frame.dims())));
    }
    let (h, w) = (frame.dims()[1], frame.dims()[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "frame {h}x{w} not padded to multiples of 32"
        )));
    }
    let c = cfg.vit_width;
    let patches = patchify(frame, cfg.vit_patch);
    let grid = (h / cfg.vit_patch, w / cfg.vit_patch);
    let embedded = add_bias(
        &patches.matmul(store.get("vit.patch_embed.w")?),
        store.get("vit.patch_embed.b")?,
    );
    let pe = sinusoidal_pe_2d(grid.0, grid.1, c);
    let embedded = embedded.add(&pe);

    // Sequence = [cls; patches].
    let l = embedded.rows() + 1;
    let mut x = Tensor::zeros(&[l, c]);
    let cls = store.get("vit.cls")?;
    for j in 0..c {
        x.set2(0, j, cls.at2(0, j));
    }
    for i in 0..embedded.rows() {
        for j in 0..c {
            x.set2(i + 1, j, embedded.at2(i, j));
        }
    }

    let mut taps = Vec::new();
    for layer in 0..cfg.vit_depth {
        let p = |suffix: &str| format!("vit.layer{layer}.{suffix}");
        let normed = layer_norm(&x, store.get(&p("ln1.gamma"))?, store.get(&p("ln1.beta"))?);
        let attn = mha_forward(
            &normed,
            store.get(&p("attn.wq"))?,
            store.get(&p("attn.wk"))?,
            store.get(&p("attn.wv"))?,
            store.get(&p("attn.wo"))?,
            cfg.vit_heads,
        );
        x = x.add(&attn);
        let normed = layer_norm(&x, store.get(&p("ln2.gamma"))?, store.get(&p("ln2.beta"))?);
        let h1 = add_bias(&normed.matmul(store.get(&p("mlp.w1"))?), store.get(&p("mlp.b1"))?);
        let h2 = add_bias(&gelu(&h1).matmul(store.get(&p("mlp.w2"))?), store.get(&p("mlp.b2"))?);
        x = x.add(&h2);

        if (layer + 1) % cfg.vit_tap_every == 0 && taps.len() < cfg.num_blocks {
            let mut patch_tokens = Tensor::zeros(&[l - 1, c]);
            for i in 1..l {
                for j in 0..c {
                    patch_tokens.set2(i - 1, j, x.at2(i, j));
                }
            }
            let cls_token = Tensor::new(&[1, c], x.row(0).to_vec());
            taps.push(VitTap { patch_tokens, cls_token });
        }
    }
    Ok(VitState { taps, grid, frozen: true })
}
