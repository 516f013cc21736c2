//! Dense row-major f64 tensors.
//!
//! Deliberately minimal: the autodiff tape in [`crate::tape`] owns all the
//! differentiable operations; `Tensor` is the storage plus the handful of
//! non-differentiable helpers (construction, indexing, elementwise maps)
//! that the frozen ViT, the oracles and the metrics need.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Self {
        let n: usize = dims.iter().product();
        assert_eq!(n, data.len(), "tensor data length {} != dims {:?}", data.len(), dims);
        Tensor { dims: dims.to_vec(), data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    /// I.i.d. normal entries.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        Tensor::from_fn(dims, |_| rng.normal(0.0, std))
    }

    /// I.i.d. uniform entries in [lo, hi).
    pub fn rand_uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Tensor::from_fn(dims, |_| rng.uniform(lo, hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Number of rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "rows() on non-2d tensor {:?}", self.dims);
        self.dims[0]
    }

    /// Number of columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "cols() on non-2d tensor {:?}", self.dims);
        self.dims[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let c = self.dims[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// (C, H, W) accessor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 3);
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert_eq!(self.dims.len(), 3);
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.dims, other.dims, "zip shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor { dims: self.dims.clone(), data }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.dims, dims);
        self.dims = dims.to_vec();
        self
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// Plain 2-d matrix product, used by the frozen ViT and test oracles.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor { dims: vec![m, n], data: out }
    }
}

/// out[m×n] = a[m×k] · b[k×n], row-major, accumulating into zeroed `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // ikj order: streams through b and out rows contiguously.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ.
pub(crate) fn matmul_transb_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n].
pub(crate) fn matmul_transa_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transb_matches_explicit_transpose() {
        let mut rng = Rng::seed_from(1);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mut out = vec![0.0; 4 * 3];
        matmul_transb_into(a.data(), b.data(), &mut out, 4, 5, 3);
        let bt = Tensor::from_fn(&[5, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            b.at2(c, r)
        });
        let want = a.matmul(&bt);
        for (x, y) in out.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
