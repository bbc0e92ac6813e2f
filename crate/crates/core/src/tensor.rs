//! Dense 4-D tensors in channel-major (C, N, H, W) layout and the GEMM kernel
//! every layer is built on.
//!
//! Channel-major storage lets a whole batch go through a convolution as one
//! matrix product: the im2col matrix has one column per (sample, y, x) and the
//! product `W · col` lands directly in (C_out, N, H, W) order.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type for network math. Implemented for `f32` (training) and `f64`
/// (finite-difference probes).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + 'static
{
    /// `c = op(a) · op(b) (+ c when accumulate)`, with `op(a)` m×k and
    /// `op(b)` k×n, all row-major. `a_t`/`b_t` mean the operand is stored
    /// transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols); stored as cols × rows when transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe the
                // row-major (or transposed row-major) layout of each slice.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Channel-major 4-D tensor: element (c, n, y, x) at `((c·N + n)·H + y)·W + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    /// Contiguous (H·W) plane for channel `c` of sample `n`.
    pub fn slice(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane();
        let start = (c * self.n + n) * p;
        &self.data[start..start + p]
    }

    pub fn slice_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let p = self.plane();
        let start = (c * self.n + n) * p;
        &mut self.data[start..start + p]
    }

    /// Contiguous (N·H·W) block for channel `c`.
    pub fn channel(&self, c: usize) -> &[T] {
        let s = self.n * self.plane();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let s = self.n * self.plane();
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64c(v.to_f64c()))
                .collect(),
        }
    }

    /// Pick samples `indices` (in that order) out of the batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(self.c, indices.len(), self.h, self.w);
        for c in 0..self.c {
            for (dst, &src) in indices.iter().enumerate() {
                out.slice_mut(c, dst).copy_from_slice(self.slice(c, src));
            }
        }
        out
    }

    /// Nearest-neighbour upsample by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Self {
        if factor == 1 {
            return self.clone();
        }
        let (h2, w2) = (self.h * factor, self.w * factor);
        let mut out = Self::zeros(self.c, self.n, h2, w2);
        for c in 0..self.c {
            for n in 0..self.n {
                let src = self.slice(c, n);
                let dst = out.slice_mut(c, n);
                for y in 0..self.h {
                    let row = &src[y * self.w..(y + 1) * self.w];
                    let block = &mut dst[y * factor * w2..(y + 1) * factor * w2];
                    let (first, rest) = block.split_at_mut(w2);
                    for (d, &v) in first.chunks_exact_mut(factor).zip(row) {
                        d.iter_mut().for_each(|o| *o = v);
                    }
                    for r in rest.chunks_exact_mut(w2) {
                        r.copy_from_slice(first);
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample_nearest`]: sums each factor×factor block.
    pub fn block_sum(&self, factor: usize) -> Self {
        if factor == 1 {
            return self.clone();
        }
        assert!(self.h.is_multiple_of(factor) && self.w.is_multiple_of(factor));
        let (h2, w2) = (self.h / factor, self.w / factor);
        let mut out = Self::zeros(self.c, self.n, h2, w2);
        for c in 0..self.c {
            for n in 0..self.n {
                let src = self.slice(c, n);
                let dst = out.slice_mut(c, n);
                for (y, row) in src.chunks_exact(self.w).enumerate() {
                    let drow = &mut dst[(y / factor) * w2..(y / factor + 1) * w2];
                    for (d, chunk) in drow.iter_mut().zip(row.chunks_exact(factor)) {
                        *d += chunk.iter().copied().sum::<T>();
                    }
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// im2col for a square kernel with "same" zero padding and stride 1.
/// Output is (C·k·k) × (N·H·W), row-major.
pub fn im2col<T: Real>(x: &Tensor<T>, k: usize, col: &mut Vec<T>) {
    let pad = (k / 2) as isize;
    let (h, w) = (x.h as isize, x.w as isize);
    let cols = x.n * x.plane();
    col.clear();
    col.resize(x.c * k * k * cols, T::zero());
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for n in 0..x.n {
                    let src = x.slice(c, n);
                    let base = n * x.plane();
                    for y in 0..h {
                        let sy = y + dy;
                        let drow = &mut dst[base + (y * w) as usize..base + ((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        for v in drow[..x0.max(0) as usize].iter_mut() {
                            *v = T::zero();
                        }
                        if x1 > x0 {
                            drow[x0 as usize..x1 as usize]
                                .copy_from_slice(&srow[(x0 + dx) as usize..(x1 + dx) as usize]);
                        }
                        for v in drow[x1.max(0) as usize..].iter_mut() {
                            *v = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a (C·k·k) × (N·H·W) matrix back into `x`.
pub fn col2im<T: Real>(col: &[T], k: usize, x: &mut Tensor<T>) {
    let pad = (k / 2) as isize;
    let (h, w) = (x.h as isize, x.w as isize);
    let cols = x.n * x.plane();
    x.data.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for n in 0..x.n {
                    let base = n * (h * w) as usize;
                    let plane = x.slice_mut(c, n);
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        if x1 <= x0 {
                            continue;
                        }
                        let srow = &src[base + (y * w) as usize..base + ((y + 1) * w) as usize];
                        let drow = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for xx in x0..x1 {
                            drow[(xx + dx) as usize] += srow[xx as usize];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut c = want.clone();
        f64::gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Tensor::from_vec(
            2,
            2,
            4,
            5,
            (0..80).map(|i| (i as f64 * 0.3).sin()).collect(),
        );
        let mut col = Vec::new();
        im2col(&x, 3, &mut col);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = Tensor::zeros(2, 2, 4, 5);
        col2im(&y, 3, &mut back);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn block_sum_is_adjoint_of_upsample() {
        let x = Tensor::from_vec(1, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let up = x.upsample_nearest(3);
        assert_eq!((up.h, up.w), (6, 6));
        assert_eq!(up.data[0], 1.0);
        assert_eq!(up.data[5], 2.0);
        assert_eq!(up.data[35], 4.0);
        let back = up.block_sum(3);
        for (a, b) in back.data.iter().zip(&x.data) {
            assert_eq!(*a, 9.0 * b);
        }
    }
}
