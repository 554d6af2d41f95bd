//! Plain image containers. Colors are RGB in `[0, 1]`, stored row-major
//! with interleaved channels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            bail!(Dimension, "{}x{} image needs {} values, got {}", width, height, width * height * 3, data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first tensor `[3, H, W]`.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (w * h), i % (w * h));
            T::of(self.data[p * 3 + c] as f64)
        })
    }

    /// Inverse of [`Image::to_chw`].
    pub fn from_chw<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            bail!(Dimension, "expected [3, H, W], got {s:?}");
        }
        let (h, w) = (s[1], s[2]);
        let d = t.data();
        let data = (0..h * w).flat_map(|p| (0..3).map(move |c| d[c * h * w + p].as_f32())).collect();
        Ok(Self { width: w, height: h, data })
    }

    /// Per-pixel mean over channels.
    pub fn gray(&self) -> Vec<f32> {
        self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    /// Values clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            bail!(Dimension, "{}x{} depth map needs {} values, got {}", width, height, width * height, data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}
