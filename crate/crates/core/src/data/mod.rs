//! Synthetic scenes, on-disk datasets, mask encoding and evaluation.

pub mod dataset;
pub mod eval;
pub mod rle;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("mask", format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask { height, width, bits }
    }

    /// Pixels of a `[H,W]` tensor strictly above `threshold`.
    pub fn threshold(t: &Tensor, threshold: f64) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("mask", format!("expected [H,W], got {:?}", t.shape())));
        }
        Ok(BinaryMask { height: t.dim(0), width: t.dim(1), bits: t.data().iter().map(|&v| v > threshold).collect() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 0/1 tensor `[H,W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}
