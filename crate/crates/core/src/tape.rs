//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records a DAG of operations as they are executed eagerly;
//! [`Tape::backward`] then walks the nodes in reverse and accumulates
//! gradients. All model modules build their forward passes out of these
//! primitives, so a finite-difference check of any composition only has to
//! trust the per-op backward rules verified here and in
//! [`crate::gradcheck`].
//!
//! Conventions: 2-d tensors are (rows, cols) row-major; feature maps are
//! (C, H, W); normalized sample coordinates are (x, y) in [0,1]² with
//! align-corners-false texel centers.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul_into, matmul_transa_into, matmul_transb_into, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// (m,n) + (1,n)
    AddRowBroadcast(Var, Var),
    /// (m,n) * (1,n)
    MulRowBroadcast(Var, Var),
    /// (m,n) * (m,1)
    MulColBroadcast(Var, Var),
    Matmul(Var, Var),
    /// a (m,k) · b(n,k)ᵀ -> (m,n)
    MatmulTransB(Var, Var),
    SoftmaxRows(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    /// Rows scaled to unit L2 norm; all-zero rows stay zero.
    NormalizeRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    /// out[i] = a[i, idx[i]] -> (m,1)
    SelectPerRow(Var, Vec<usize>),
    /// Column-wise max over rows, (m,n) -> (1,n); ties keep the lowest row.
    MaxCols(Var, Vec<usize>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    /// Each row repeated k times consecutively.
    RepeatRows(Var, usize),
    /// Consecutive groups of k rows summed, (m·k,n) -> (m,n).
    SumRowGroups(Var, usize),
    /// feat (C,H,W), points (P,2) normalized; zero padding outside.
    BilinearSample {
        feat: Var,
        points: Var,
    },
    /// (C,H,W) -> (C,oh,ow), align-corners-false, edges clamped.
    Resize {
        x: Var,
        oh: usize,
        ow: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.g[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let phi_pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    phi_cdf + x * phi_pdf
}

/// Four-corner bilinear footprint of a normalized point on an H×W grid.
/// Returns (x0, y0, dx, dy) with align-corners-false texel centers.
#[inline]
fn sample_footprint(px: f64, py: f64, h: usize, w: usize) -> (i64, i64, f64, f64) {
    let x = px * w as f64 - 0.5;
    let y = py * h as f64 - 0.5;
    let x0 = libm::floor(x) as i64;
    let y0 = libm::floor(y) as i64;
    (x0, y0, x - x0 as f64, y - y0 as f64)
}

#[inline]
fn in_range(v: i64, n: usize) -> bool {
    v >= 0 && (v as usize) < n
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "conv kernel larger than padded input");
    (input + 2 * pad - k) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Insert a value that does not participate in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (parameter or checked input).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(tb.dims(), &[1, n], "row broadcast shape");
        let mut out = ta.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.at2(i, j) + tb.at2(0, j);
                out.set2(i, j, v);
            }
        }
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::AddRowBroadcast(a, b), ng)
    }

    pub fn mul_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(tb.dims(), &[1, n], "row broadcast shape");
        let mut out = ta.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.at2(i, j) * tb.at2(0, j);
                out.set2(i, j, v);
            }
        }
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::MulRowBroadcast(a, b), ng)
    }

    pub fn mul_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(tb.dims(), &[m, 1], "col broadcast shape");
        let mut out = ta.clone();
        for i in 0..m {
            let s = tb.at2(i, 0);
            for j in 0..n {
                let v = out.at2(i, j) * s;
                out.set2(i, j, v);
            }
        }
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::MulColBroadcast(a, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Matmul(a, b), ng)
    }

    /// a (m,k) · b(n,k)ᵀ.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_transb inner dims");
        let mut out = vec![0.0; m * n];
        matmul_transb_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatmulTransB(a, b), ng)
    }

    /// Softmax along each row. Rows may contain -inf entries (masked out);
    /// a fully -inf row is a caller bug and panics.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = ta.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax row {i} has no finite entry");
            let mut sum = 0.0;
            for j in 0..n {
                let e = libm::exp(row[j] - max);
                out.set2(i, j, e);
                sum += e;
            }
            for j in 0..n {
                let v = out.at2(i, j) / sum;
                out.set2(i, j, v);
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + libm::exp(-x)));
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::log);
        debug_assert!(v.is_finite(), "log of non-positive value");
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Log(a), ng)
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = ta.row(i);
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            if norm > 0.0 {
                for j in 0..n {
                    out.set2(i, j, row[j] / norm);
                }
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::NormalizeRows(a), ng)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(self.value(gamma).dims(), &[1, n]);
        assert_eq!(self.value(beta).dims(), &[1, n]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                out.set2(i, j, self.value(gamma).at2(0, j) * xh + self.value(beta).at2(0, j));
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(out, Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = Tensor::zeros(&[indices.len(), n]);
        for (i, &r) in indices.iter().enumerate() {
            assert!(r < ta.rows(), "gather_rows index {r} out of range");
            for j in 0..n {
                out.set2(i, j, ta.at2(r, j));
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::GatherRows(a, indices.to_vec()), ng)
    }

    pub fn select_per_row(&mut self, a: Var, cols: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(cols.len(), ta.rows(), "select_per_row length");
        let mut out = Tensor::zeros(&[cols.len(), 1]);
        for (i, &c) in cols.iter().enumerate() {
            assert!(c < ta.cols(), "select_per_row column {c} out of range");
            out.set2(i, 0, ta.at2(i, c));
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::SelectPerRow(a, cols.to_vec()), ng)
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        assert!(m > 0);
        let mut out = Tensor::zeros(&[1, n]);
        let mut arg = vec![0usize; n];
        for j in 0..n {
            let mut best = ta.at2(0, j);
            let mut bi = 0;
            for i in 1..m {
                let v = ta.at2(i, j);
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out.set2(0, j, best);
            arg[j] = bi;
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::MaxCols(a, arg), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        assert!(start + len <= ta.rows(), "slice_rows out of range");
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::new(&[len, n], data), Op::SliceRows(a, start, len), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Tensor::zeros(&[m, len]);
        for i in 0..m {
            for j in 0..len {
                out.set2(i, j, ta.at2(i, start + j));
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::SliceCols(a, start, len), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols(), n, "concat_rows column mismatch");
            m += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let ng = self.any_grad(parts);
        self.push(Tensor::new(&[m, n], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[m, total]);
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows(), m, "concat_cols row mismatch");
            for i in 0..m {
                for j in 0..tp.cols() {
                    out.set2(i, off + j, tp.at2(i, j));
                }
            }
            off += tp.cols();
        }
        let ng = self.any_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(dims);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, ta.at2(i, j));
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(m * k * n);
        for i in 0..m {
            for _ in 0..k {
                data.extend_from_slice(ta.row(i));
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(Tensor::new(&[m * k, n], data), Op::RepeatRows(a, k), ng)
    }

    pub fn sum_row_groups(&mut self, a: Var, k: usize) -> Var {
        let ta = self.value(a);
        let (mk, n) = (ta.rows(), ta.cols());
        assert_eq!(mk % k, 0, "sum_row_groups: rows not divisible by k");
        let m = mk / k;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..mk {
            let g = i / k;
            for j in 0..n {
                let v = out.at2(g, j) + ta.at2(i, j);
                out.set2(g, j, v);
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::SumRowGroups(a, k), ng)
    }

    /// Bilinear sampling of `feat` (C,H,W) at `points` (P,2) in normalized
    /// (x, y) coordinates; contributions outside [0,1]² are zero-padded.
    /// Differentiable in both arguments.
    pub fn bilinear_sample(&mut self, feat: Var, points: Var) -> Var {
        let tf = self.value(feat);
        let tp = self.value(points);
        assert_eq!(tf.dims().len(), 3, "bilinear_sample feat must be (C,H,W)");
        assert_eq!(tp.cols(), 2, "points must be (P,2)");
        let (c, h, w) = (tf.dims()[0], tf.dims()[1], tf.dims()[2]);
        let p = tp.rows();
        let mut out = Tensor::zeros(&[p, c]);
        for pi in 0..p {
            let (x0, y0, dx, dy) = sample_footprint(tp.at2(pi, 0), tp.at2(pi, 1), h, w);
            let corners = [
                (x0, y0, (1.0 - dx) * (1.0 - dy)),
                (x0 + 1, y0, dx * (1.0 - dy)),
                (x0, y0 + 1, (1.0 - dx) * dy),
                (x0 + 1, y0 + 1, dx * dy),
            ];
            for ci in 0..c {
                let mut acc = 0.0;
                for &(cx, cy, wt) in &corners {
                    if wt != 0.0 && in_range(cx, w) && in_range(cy, h) {
                        acc += wt * tf.at3(ci, cy as usize, cx as usize);
                    }
                }
                out.set2(pi, ci, acc);
            }
        }
        let ng = self.any_grad(&[feat, points]);
        self.push(out, Op::BilinearSample { feat, points }, ng)
    }

    /// Bilinear resize of a (C,H,W) map, align-corners-false, borders clamped.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.dims().len(), 3, "resize input must be (C,H,W)");
        let (c, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
        let xs = resize_axis(w, ow);
        let ys = resize_axis(h, oh);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = ys[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = xs[ox];
                    let v = tx.at3(ci, y0, x0) * (1.0 - fx) * (1.0 - fy)
                        + tx.at3(ci, y0, x1) * fx * (1.0 - fy)
                        + tx.at3(ci, y1, x0) * (1.0 - fx) * fy
                        + tx.at3(ci, y1, x1) * fx * fy;
                    out.set3(ci, oy, ox, v);
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Resize { x, oh, ow }, ng)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        assert_eq!(tx.dims().len(), 3, "conv2d input must be (C,H,W)");
        assert_eq!(tw.dims().len(), 4, "conv2d weight must be (Cout,Cin/g,kh,kw)");
        let (cin, h, wdt) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
        let (cout, cin_g, kh, kw) = (tw.dims()[0], tw.dims()[1], tw.dims()[2], tw.dims()[3]);
        assert_eq!(cin % groups, 0);
        assert_eq!(cout % groups, 0);
        assert_eq!(cin / groups, cin_g, "conv2d channel grouping");
        if let Some(bv) = b {
            assert_eq!(self.value(bv).dims(), &[cout]);
        }
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wdt, kw, stride, pad);
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        let co_per_g = cout / groups;
        for co in 0..cout {
            let g = co / co_per_g;
            let base = b.map_or(0.0, |bv| self.value(bv).data()[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for cil in 0..cin_g {
                        let ci = g * cin_g + cil;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if !in_range(iy, h) {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if !in_range(ix, wdt) {
                                    continue;
                                }
                                acc += tw.data()[((co * cin_g + cil) * kh + ky) * kw + kx]
                                    * tx.at3(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set3(co, oy, ox, acc);
                }
            }
        }
        let mut ps = vec![x, w];
        if let Some(bv) = b {
            ps.push(bv);
        }
        let ng = self.any_grad(&ps);
        self.push(out, Op::Conv2d { x, w, b, stride, pad, groups }, ng)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                g[id] = None;
                continue;
            }
            let Some(gout) = g[id].take() else { continue };
            self.step_backward(id, &gout, &mut g);
            // Re-store for callers that want gradients of interior nodes.
            g[id] = Some(gout);
        }
        Grads { g }
    }

    fn accum(&self, g: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut g[v.0] {
            Some(t) => {
                let dd = delta.data();
                for (a, b) in t.data_mut().iter_mut().zip(dd) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&self, id: usize, gout: &Tensor, g: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(g, *a, gout.clone());
                self.accum(g, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(g, *a, gout.clone());
                self.accum(g, *b, gout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accum(g, *a, gout.zip(self.value(*b), |g, y| g * y));
                self.accum(g, *b, gout.zip(self.value(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                self.accum(g, *a, gout.zip(tb, |g, y| g / y));
                let ta = self.value(*a);
                let mut gb = gout.zip(ta, |g, x| g * x);
                for (v, y) in gb.data_mut().iter_mut().zip(tb.data()) {
                    *v = -*v / (y * y);
                }
                self.accum(g, *b, gb);
            }
            Op::Scale(a, s) => self.accum(g, *a, gout.scale(*s)),
            Op::AddScalar(a) => self.accum(g, *a, gout.clone()),
            Op::AddRowBroadcast(a, b) => {
                self.accum(g, *a, gout.clone());
                let (m, n) = (gout.rows(), gout.cols());
                let mut gb = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    for j in 0..n {
                        let v = gb.at2(0, j) + gout.at2(i, j);
                        gb.set2(0, j, v);
                    }
                }
                self.accum(g, *b, gb);
            }
            Op::MulRowBroadcast(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (gout.rows(), gout.cols());
                let mut ga = Tensor::zeros(&[m, n]);
                let mut gb = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    for j in 0..n {
                        ga.set2(i, j, gout.at2(i, j) * tb.at2(0, j));
                        let v = gb.at2(0, j) + gout.at2(i, j) * ta.at2(i, j);
                        gb.set2(0, j, v);
                    }
                }
                self.accum(g, *a, ga);
                self.accum(g, *b, gb);
            }
            Op::MulColBroadcast(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (gout.rows(), gout.cols());
                let mut ga = Tensor::zeros(&[m, n]);
                let mut gb = Tensor::zeros(&[m, 1]);
                for i in 0..m {
                    let s = tb.at2(i, 0);
                    let mut acc = 0.0;
                    for j in 0..n {
                        ga.set2(i, j, gout.at2(i, j) * s);
                        acc += gout.at2(i, j) * ta.at2(i, j);
                    }
                    gb.set2(i, 0, acc);
                }
                self.accum(g, *a, ga);
                self.accum(g, *b, gb);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_transb_into(gout.data(), tb.data(), &mut ga, m, n, k);
                    self.accum(g, *a, Tensor::new(&[m, k], ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_transa_into(ta.data(), gout.data(), &mut gb, m, k, n);
                    self.accum(g, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::MatmulTransB(a, b) => {
                // y = a bᵀ: ga = g·b, gb = gᵀ·a.
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(gout.data(), tb.data(), &mut ga, m, n, k);
                    self.accum(g, *a, Tensor::new(&[m, k], ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; n * k];
                    matmul_transa_into(gout.data(), ta.data(), &mut gb, m, n, k);
                    self.accum(g, *b, Tensor::new(&[n, k], gb));
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(id_var(id));
                let (m, n) = (y.rows(), y.cols());
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += gout.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..n {
                        ga.set2(i, j, y.at2(i, j) * (gout.at2(i, j) - dot));
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                self.accum(g, *a, gout.zip(ta, |g, x| g * gelu_grad_scalar(x)));
            }
            Op::Sigmoid(a) => {
                let y = self.value(id_var(id));
                self.accum(g, *a, gout.zip(y, |g, s| g * s * (1.0 - s)));
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                self.accum(g, *a, gout.zip(ta, |g, x| g / x));
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                self.accum(
                    g,
                    *a,
                    gout.zip(ta, |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                );
            }
            Op::NormalizeRows(a) => {
                let ta = self.value(*a);
                let y = self.value(id_var(id));
                let (m, n) = (ta.rows(), ta.cols());
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let row = ta.row(i);
                    let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
                    if norm == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += gout.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..n {
                        ga.set2(i, j, (gout.at2(i, j) - y.at2(i, j) * dot) / norm);
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (m, n) = (tx.rows(), tx.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                let mut gg = Tensor::zeros(&[1, n]);
                let mut gb = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    let row = tx.row(i);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let mut mean_gh = 0.0;
                    let mut mean_ghxh = 0.0;
                    let mut xh = vec![0.0; n];
                    let mut gh = vec![0.0; n];
                    for j in 0..n {
                        xh[j] = (row[j] - mean) * inv;
                        gh[j] = gout.at2(i, j) * tg.at2(0, j);
                        mean_gh += gh[j];
                        mean_ghxh += gh[j] * xh[j];
                        let v = gg.at2(0, j) + gout.at2(i, j) * xh[j];
                        gg.set2(0, j, v);
                        let v = gb.at2(0, j) + gout.at2(i, j);
                        gb.set2(0, j, v);
                    }
                    mean_gh /= n as f64;
                    mean_ghxh /= n as f64;
                    for j in 0..n {
                        gx.set2(i, j, inv * (gh[j] - mean_gh - xh[j] * mean_ghxh));
                    }
                }
                self.accum(g, *x, gx);
                self.accum(g, *gamma, gg);
                self.accum(g, *beta, gb);
            }
            Op::SumAll(a) => {
                let s = gout.data()[0];
                self.accum(g, *a, Tensor::full(self.value(*a).dims(), s));
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..ta.cols() {
                        let v = ga.at2(r, j) + gout.at2(i, j);
                        ga.set2(r, j, v);
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::SelectPerRow(a, cols) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for (i, &c) in cols.iter().enumerate() {
                    ga.set2(i, c, gout.at2(i, 0));
                }
                self.accum(g, *a, ga);
            }
            Op::MaxCols(a, arg) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for (j, &i) in arg.iter().enumerate() {
                    ga.set2(i, j, gout.at2(0, j));
                }
                self.accum(g, *a, ga);
            }
            Op::SliceRows(a, start, len) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for i in 0..*len {
                    for j in 0..ta.cols() {
                        ga.set2(start + i, j, gout.at2(i, j));
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::SliceCols(a, start, len) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for i in 0..ta.rows() {
                    for j in 0..*len {
                        ga.set2(i, start + j, gout.at2(i, j));
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Tensor::zeros(&[rows, cols]);
                        for i in 0..rows {
                            for j in 0..cols {
                                gp.set2(i, j, gout.at2(off + i, j));
                            }
                        }
                        self.accum(g, p, gp);
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Tensor::zeros(&[rows, cols]);
                        for i in 0..rows {
                            for j in 0..cols {
                                gp.set2(i, j, gout.at2(i, off + j));
                            }
                        }
                        self.accum(g, p, gp);
                    }
                    off += cols;
                }
            }
            Op::Reshape(a) => {
                let dims = self.value(*a).dims().to_vec();
                self.accum(g, *a, gout.clone().reshaped(&dims));
            }
            Op::Transpose(a) => {
                let (m, n) = (gout.rows(), gout.cols());
                let mut ga = Tensor::zeros(&[n, m]);
                for i in 0..m {
                    for j in 0..n {
                        ga.set2(j, i, gout.at2(i, j));
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::RepeatRows(a, k) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m * k {
                    let r = i / k;
                    for j in 0..n {
                        let v = ga.at2(r, j) + gout.at2(i, j);
                        ga.set2(r, j, v);
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::SumRowGroups(a, k) => {
                let ta = self.value(*a);
                let (mk, n) = (ta.rows(), ta.cols());
                let mut ga = Tensor::zeros(&[mk, n]);
                for i in 0..mk {
                    let r = i / k;
                    for j in 0..n {
                        ga.set2(i, j, gout.at2(r, j));
                    }
                }
                self.accum(g, *a, ga);
            }
            Op::BilinearSample { feat, points } => {
                let tf = self.value(*feat);
                let tp = self.value(*points);
                let (c, h, w) = (tf.dims()[0], tf.dims()[1], tf.dims()[2]);
                let pn = tp.rows();
                let feat_needs = self.nodes[feat.0].needs_grad;
                let pts_needs = self.nodes[points.0].needs_grad;
                let mut gf = Tensor::zeros(&[c, h, w]);
                let mut gp = Tensor::zeros(&[pn, 2]);
                for pi in 0..pn {
                    let (x0, y0, dx, dy) = sample_footprint(tp.at2(pi, 0), tp.at2(pi, 1), h, w);
                    let f = |cx: i64, cy: i64, ci: usize| -> f64 {
                        if in_range(cx, w) && in_range(cy, h) {
                            tf.at3(ci, cy as usize, cx as usize)
                        } else {
                            0.0
                        }
                    };
                    let corners = [
                        (x0, y0, (1.0 - dx) * (1.0 - dy)),
                        (x0 + 1, y0, dx * (1.0 - dy)),
                        (x0, y0 + 1, (1.0 - dx) * dy),
                        (x0 + 1, y0 + 1, dx * dy),
                    ];
                    let mut gx_acc = 0.0;
                    let mut gy_acc = 0.0;
                    for ci in 0..c {
                        let go = gout.at2(pi, ci);
                        if go == 0.0 {
                            continue;
                        }
                        if feat_needs {
                            for &(cx, cy, wt) in &corners {
                                if wt != 0.0 && in_range(cx, w) && in_range(cy, h) {
                                    let v = gf.at3(ci, cy as usize, cx as usize) + go * wt;
                                    gf.set3(ci, cy as usize, cx as usize, v);
                                }
                            }
                        }
                        if pts_needs {
                            let d_dx = (f(x0 + 1, y0, ci) - f(x0, y0, ci)) * (1.0 - dy)
                                + (f(x0 + 1, y0 + 1, ci) - f(x0, y0 + 1, ci)) * dy;
                            let d_dy = (f(x0, y0 + 1, ci) - f(x0, y0, ci)) * (1.0 - dx)
                                + (f(x0 + 1, y0 + 1, ci) - f(x0 + 1, y0, ci)) * dx;
                            gx_acc += go * d_dx * w as f64;
                            gy_acc += go * d_dy * h as f64;
                        }
                    }
                    if pts_needs {
                        gp.set2(pi, 0, gx_acc);
                        gp.set2(pi, 1, gy_acc);
                    }
                }
                if feat_needs {
                    self.accum(g, *feat, gf);
                }
                if pts_needs {
                    self.accum(g, *points, gp);
                }
            }
            Op::Resize { x, oh, ow } => {
                let tx = self.value(*x);
                let (c, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
                let xs = resize_axis(w, *ow);
                let ys = resize_axis(h, *oh);
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for oy in 0..*oh {
                        let (y0, y1, fy) = ys[oy];
                        for ox in 0..*ow {
                            let (x0, x1, fx) = xs[ox];
                            let go = gout.at3(ci, oy, ox);
                            if go == 0.0 {
                                continue;
                            }
                            let mut bump = |yy: usize, xx: usize, wt: f64| {
                                let v = gx.at3(ci, yy, xx) + go * wt;
                                gx.set3(ci, yy, xx, v);
                            };
                            bump(y0, x0, (1.0 - fx) * (1.0 - fy));
                            bump(y0, x1, fx * (1.0 - fy));
                            bump(y1, x0, (1.0 - fx) * fy);
                            bump(y1, x1, fx * fy);
                        }
                    }
                }
                self.accum(g, *x, gx);
            }
            Op::Conv2d { x, w, b, stride, pad, groups } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (cin, h, wdt) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
                let (cout, cin_g, kh, kw) = (tw.dims()[0], tw.dims()[1], tw.dims()[2], tw.dims()[3]);
                let (oh, ow) = (gout.dims()[1], gout.dims()[2]);
                let co_per_g = cout / groups;
                let x_needs = self.nodes[x.0].needs_grad;
                let w_needs = self.nodes[w.0].needs_grad;
                let mut gx = Tensor::zeros(&[cin, h, wdt]);
                let mut gw = Tensor::zeros(&[cout, cin_g, kh, kw]);
                let mut gb = Tensor::zeros(&[cout]);
                for co in 0..cout {
                    let grp = co / co_per_g;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gout.at3(co, oy, ox);
                            if go == 0.0 {
                                continue;
                            }
                            gb.data_mut()[co] += go;
                            for cil in 0..cin_g {
                                let ci = grp * cin_g + cil;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as i64 - *pad as i64;
                                    if !in_range(iy, h) {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as i64 - *pad as i64;
                                        if !in_range(ix, wdt) {
                                            continue;
                                        }
                                        let widx = ((co * cin_g + cil) * kh + ky) * kw + kx;
                                        if x_needs {
                                            let v = gx.at3(ci, iy as usize, ix as usize)
                                                + go * tw.data()[widx];
                                            gx.set3(ci, iy as usize, ix as usize, v);
                                        }
                                        if w_needs {
                                            gw.data_mut()[widx] +=
                                                go * tx.at3(ci, iy as usize, ix as usize);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if x_needs {
                    self.accum(g, *x, gx);
                }
                if w_needs {
                    self.accum(g, *w, gw);
                }
                if let Some(bv) = b {
                    self.accum(g, *bv, gb);
                }
            }
        }
    }
}

#[inline]
fn id_var(id: usize) -> Var {
    Var(id)
}

/// Per-output-pixel (i0, i1, frac) source footprint for bilinear resize.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = libm::floor(s) as usize;
            let i0 = i0.min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec::Vec;

    /// Central finite-difference gradient of `f` w.r.t. the idx-th input.
    fn fd_grad(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
        h: f64,
    ) -> Tensor {
        let mut grad = Tensor::zeros(inputs[which].dims());
        for i in 0..inputs[which].numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn check_op(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        // Weighted sum keeps checks meaningful for normalized outputs.
        let mut wrng = Rng::seed_from(999);
        let w = tape.constant(Tensor::randn(tape.value(out).dims(), 1.0, &mut wrng));
        let prod = tape.mul(out, w);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);

        let f = |xs: &[Tensor]| -> f64 {
            let mut t2 = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|t| t2.param(t.clone())).collect();
            let o = build(&mut t2, &vs);
            let mut wrng = Rng::seed_from(999);
            let w2 = t2.constant(Tensor::randn(t2.value(o).dims(), 1.0, &mut wrng));
            let p = t2.mul(o, w2);
            let l = t2.sum_all(p);
            t2.value(l).data()[0]
        };

        for (wi, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[wi].dims()));
            let numeric = fd_grad(&f, inputs, wi, 1e-5);
            for i in 0..analytic.numel() {
                let (a, b) = (analytic.data()[i], numeric.data()[i]);
                let denom = a.abs().max(b.abs()).max(1e-8);
                let rel = (a - b).abs() / denom;
                assert!(
                    rel <= tol,
                    "input {wi} entry {i}: analytic {a} vs fd {b} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_and_matmul() {
        let mut rng = Rng::seed_from(5);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        check_op(&|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
        check_op(&|t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
        check_op(&|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
        let bpos = b.map(|x| x.abs() + 0.5);
        check_op(&|t, v| t.div(v[0], v[1]), &[a.clone(), bpos], 1e-6);

        let m1 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let m2 = Tensor::randn(&[5, 2], 1.0, &mut rng);
        check_op(&|t, v| t.matmul(v[0], v[1]), &[m1.clone(), m2], 1e-6);
        let m3 = Tensor::randn(&[4, 5], 1.0, &mut rng);
        check_op(&|t, v| t.matmul_transb(v[0], v[1]), &[m1, m3], 1e-6);
    }

    #[test]
    fn grad_broadcasts_and_reductions() {
        let mut rng = Rng::seed_from(6);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let row = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let col = Tensor::randn(&[4, 1], 1.0, &mut rng);
        check_op(&|t, v| t.add_row_broadcast(v[0], v[1]), &[a.clone(), row.clone()], 1e-6);
        check_op(&|t, v| t.mul_row_broadcast(v[0], v[1]), &[a.clone(), row], 1e-6);
        check_op(&|t, v| t.mul_col_broadcast(v[0], v[1]), &[a.clone(), col], 1e-6);
        check_op(&|t, v| t.sum_all(v[0]), &[a.clone()], 1e-6);
        check_op(&|t, v| t.max_cols(v[0]), &[a.clone()], 1e-5);
        check_op(&|t, v| t.select_per_row(v[0], &[2, 0, 1, 2]), &[a], 1e-6);
    }

    #[test]
    fn grad_nonlinearities() {
        let mut rng = Rng::seed_from(7);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        check_op(&|t, v| t.softmax_rows(v[0]), &[a.clone()], 1e-5);
        check_op(&|t, v| t.gelu(v[0]), &[a.clone()], 1e-5);
        check_op(&|t, v| t.sigmoid(v[0]), &[a.clone()], 1e-6);
        check_op(&|t, v| t.normalize_rows(v[0]), &[a.clone()], 1e-5);
        let pos = a.map(|x| x.abs() + 0.3);
        check_op(&|t, v| t.log(v[0]), &[pos], 1e-6);
        let g = Tensor::randn(&[1, 5], 0.5, &mut rng).map(|x| x + 1.0);
        let be = Tensor::randn(&[1, 5], 0.5, &mut rng);
        check_op(
            &|t, v| t.layer_norm_rows(v[0], v[1], v[2], 1e-6),
            &[a, g, be],
            1e-4,
        );
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = Rng::seed_from(8);
        let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 6], 1.0, &mut rng);
        check_op(&|t, v| t.slice_rows(v[0], 1, 2), &[a.clone()], 1e-6);
        check_op(&|t, v| t.slice_cols(v[0], 2, 3), &[a.clone()], 1e-6);
        check_op(&|t, v| t.concat_rows(&[v[0], v[1]]), &[a.clone(), b.clone()], 1e-6);
        let c = Tensor::randn(&[4, 2], 1.0, &mut rng);
        check_op(&|t, v| t.concat_cols(&[v[0], v[1]]), &[a.clone(), c], 1e-6);
        check_op(&|t, v| t.transpose(v[0]), &[a.clone()], 1e-6);
        check_op(&|t, v| t.reshape(v[0], &[6, 4]), &[a.clone()], 1e-6);
        check_op(&|t, v| t.repeat_rows(v[0], 3), &[a.clone()], 1e-6);
        check_op(&|t, v| t.sum_row_groups(v[0], 2), &[a.clone()], 1e-6);
        check_op(&|t, v| t.gather_rows(v[0], &[3, 0, 0, 2]), &[a], 1e-6);
    }

    #[test]
    fn grad_sampling_ops() {
        let mut rng = Rng::seed_from(9);
        let feat = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        // Points away from texel-boundary kinks; includes an out-of-range one.
        let points = Tensor::new(
            &[4, 2],
            vec![0.33, 0.41, 0.72, 0.18, 0.055, 0.93, 1.21, 0.52],
        );
        check_op(
            &|t, v| t.bilinear_sample(v[0], v[1]),
            &[feat.clone(), points],
            1e-5,
        );
        check_op(&|t, v| t.resize(v[0], 6, 9), &[feat.clone()], 1e-6);
        check_op(&|t, v| t.resize(v[0], 2, 3), &[feat], 1e-6);
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = Rng::seed_from(10);
        let x = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 4, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[6], 0.5, &mut rng);
        check_op(
            &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1),
            &[x.clone(), w, b.clone()],
            1e-5,
        );
        // Strided + grouped (depthwise).
        let wd = Tensor::randn(&[4, 1, 3, 3], 0.5, &mut rng);
        let bd = Tensor::randn(&[4], 0.5, &mut rng);
        check_op(
            &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 4),
            &[x, wd, bd],
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_matches_subsequence() {
        // -inf logits drop entries exactly: softmax over the surviving
        // subsequence must be bit-identical.
        let mut rng = Rng::seed_from(11);
        let full = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let mut masked = full.clone();
        masked.data_mut()[2] = f64::NEG_INFINITY;
        masked.data_mut()[5] = f64::NEG_INFINITY;
        let keep = [0usize, 1, 3, 4];
        let sub = Tensor::new(&[1, 4], keep.iter().map(|&i| full.data()[i]).collect());

        let mut tape = Tape::new();
        let vm = tape.constant(masked);
        let vs = tape.constant(sub);
        let sm = tape.softmax_rows(vm);
        let ss = tape.softmax_rows(vs);
        for (k, &i) in keep.iter().enumerate() {
            assert_eq!(tape.value(sm).data()[i], tape.value(ss).data()[k]);
        }
        assert_eq!(tape.value(sm).data()[2], 0.0);
        assert_eq!(tape.value(sm).data()[5], 0.0);
    }

    #[test]
    fn constants_are_not_differentiated() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 2], 3.0));
        let p = tape.param(Tensor::full(&[2, 2], 2.0));
        let y = tape.mul(c, p);
        let l = tape.sum_all(y);
        let g = tape.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }
}
