//! Dense row-major `f64` arrays and the raw numeric kernels behind the
//! differentiable operations.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A dense, row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Builds a tensor whose size is known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(low..high))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn transpose2d(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// Bilinear resize of a `[C,H,W]` map by an integer factor
    /// (half-pixel centers, edge-clamped taps).
    pub fn resize_bilinear(&self, factor: usize) -> Result<Tensor> {
        if self.rank() != 3 || factor == 0 {
            return Err(Error::shape("resize_bilinear", format!("{:?} x{factor}", self.shape)));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let plan = ResizePlan::new(h, w, factor);
        let mut out = vec![0.0; c * plan.out_h * plan.out_w];
        plan.forward(&self.data, &mut out, c);
        Ok(Tensor::from_parts(vec![c, plan.out_h, plan.out_w], out))
    }
}

// ---------------------------------------------------------------------------
// Matrix kernels. All matrices are row-major slices.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * q + l] * b[4 * q + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// ---------------------------------------------------------------------------
// Convolution lowering.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeometry { c_in, h, w, k, stride, pad, out_h, out_w })
    }

    pub fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Lowers `[C,H,W]` to `[C*k*k, out_h*out_w]`.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.cols_len();
        let mut cols = vec![0.0; self.cols_rows() * n];
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.out_w + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back onto `[C,H,W]`.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.cols_len();
        let mut out = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Separable bilinear resize with half-pixel centers.

/// Source taps for one output coordinate: `(i0, i1, w0, w1)`.
type Tap = (usize, usize, f64, f64);

#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl ResizePlan {
    pub fn new(h: usize, w: usize, factor: usize) -> Self {
        ResizePlan {
            h,
            w,
            out_h: h * factor,
            out_w: w * factor,
            rows: Self::taps(h, factor),
            cols: Self::taps(w, factor),
        }
    }

    fn taps(n: usize, factor: usize) -> Vec<Tap> {
        (0..n * factor)
            .map(|o| {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                let frac = src - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64], channels: usize) {
        let (ih, iw, oh, ow) = (self.h, self.w, self.out_h, self.out_w);
        let mut tmp = vec![0.0; oh * iw];
        for c in 0..channels {
            let src = &input[c * ih * iw..(c + 1) * ih * iw];
            for (oy, &(y0, y1, a0, a1)) in self.rows.iter().enumerate() {
                for x in 0..iw {
                    tmp[oy * iw + x] = a0 * src[y0 * iw + x] + a1 * src[y1 * iw + x];
                }
            }
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for (ox, &(x0, x1, b0, b1)) in self.cols.iter().enumerate() {
                    dst[oy * ow + ox] = b0 * tmp[oy * iw + x0] + b1 * tmp[oy * iw + x1];
                }
            }
        }
    }

    /// Transpose of [`forward`](Self::forward).
    pub fn backward(&self, grad_out: &[f64], grad_in: &mut [f64], channels: usize) {
        let (ih, iw, oh, ow) = (self.h, self.w, self.out_h, self.out_w);
        let mut tmp = vec![0.0; oh * iw];
        for c in 0..channels {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for (ox, &(x0, x1, b0, b1)) in self.cols.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    tmp[oy * iw + x0] += b0 * v;
                    tmp[oy * iw + x1] += b1 * v;
                }
            }
            let dst = &mut grad_in[c * ih * iw..(c + 1) * ih * iw];
            for (oy, &(y0, y1, a0, a1)) in self.rows.iter().enumerate() {
                for x in 0..iw {
                    let v = tmp[oy * iw + x];
                    dst[y0 * iw + x] += a0 * v;
                    dst[y1 * iw + x] += a1 * v;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear point sampling with zero padding.

/// The four taps around a normalized location in an `h x w` grid whose
/// pixel centers sit at `(i + 0.5) / n`. Taps outside the grid carry a
/// `None` index and contribute zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    pub idx: [Option<usize>; 4],
    pub weight: [f64; 4],
    /// d weight / d x_pixel and d weight / d y_pixel for each tap.
    pub dwdx: [f64; 4],
    pub dwdy: [f64; 4],
}

impl BilinearTaps {
    pub fn new(px: f64, py: f64, h: usize, w: usize) -> Self {
        let x = px * w as f64 - 0.5;
        let y = py * h as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let coords = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
        let weight = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let dwdx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
        let dwdy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
        let mut idx = [None; 4];
        for (slot, &(cx, cy)) in idx.iter_mut().zip(&coords) {
            if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                *slot = Some(cy as usize * w + cx as usize);
            }
        }
        BilinearTaps { idx, weight, dwdx, dwdy }
    }
}
