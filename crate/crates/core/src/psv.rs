//! Plane-sweep encoder: shared 2D features, homography warping onto
//! reference-frustum depth planes, masked variance cost, 3D UNet.

use alloc::format;
use alloc::vec::Vec;

use crate::camera::{apply_homography, plane_homography, Camera};
use crate::error::{bail, Result};
use crate::nn::{BatchNorm, Conv, ConvTranspose3d, Forward};
use crate::tensor::{Graph, Group, ParamSet, Tensor, Var};
use crate::Real;

/// Feature maps are a quarter of the image resolution.
pub const FEATURE_STRIDE: usize = 4;

/// `count` plane depths between `near` and `far`, uniform in disparity and
/// increasing.
pub fn disparity_planes(near: f64, far: f64, count: usize) -> Result<Vec<f64>> {
    if !(near > 0.0 && far > near) || count < 2 {
        bail!(Domain, "need 0 < near < far and at least two planes");
    }
    let (a, b) = (1.0 / near, 1.0 / far);
    Ok((0..count).map(|k| 1.0 / (a + (b - a) * k as f64 / (count - 1) as f64)).collect())
}

/// Continuous plane index of camera-frame depth `z` on a disparity-uniform
/// stack; out-of-range depths map outside `[0, count - 1]`.
pub fn plane_index(z: f64, near: f64, far: f64, count: usize) -> f64 {
    if !(z > 0.0) {
        return f64::NAN;
    }
    (1.0 / z - 1.0 / near) / (1.0 / far - 1.0 / near) * (count - 1) as f64
}

/// Conv + BN + ReLU, three blocks, the last two at stride 2.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    blocks: Vec<(Conv, BatchNorm)>,
    pub channels: usize,
}

impl FeatureNet {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, channels: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for (i, (ci, stride)) in [(3, 1), (channels, 2), (channels, 2)].into_iter().enumerate() {
            let conv = Conv::new2d(ps, Group::Encoder, &format!("conv{i}"), ci, channels, 3, stride, 1, false)?;
            blocks.push((conv, BatchNorm::new(ps, Group::Encoder, &format!("bn{i}"), channels)?));
        }
        Ok(Self { blocks, channels })
    }

    /// `images [N, 3, H, W]` to `[N, C, H/4, W/4]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<T>, images: Var) -> Result<Var> {
        let s = f.g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            bail!(Dimension, "feature encoder expects [N, 3, H, W], got {s:?}");
        }
        if s[2] % FEATURE_STRIDE != 0 || s[3] % FEATURE_STRIDE != 0 {
            bail!(Contract, "image size {}x{} is not divisible by {FEATURE_STRIDE}", s[3], s[2]);
        }
        let mut x = images;
        for (conv, bn) in &self.blocks {
            x = conv.forward(f, x)?;
            x = bn.forward(f, x)?;
            x = f.g.relu(x);
        }
        Ok(x)
    }
}

/// One source view's features resampled onto the reference depth planes.
#[derive(Clone, Debug)]
pub struct SweepVolume {
    /// `[C, D, h, w]`.
    pub volume: Var,
    /// Validity per `(d, y, x)` cell.
    pub mask: Vec<bool>,
}

/// Warps `feat [C, h, w]` of `cam_i` onto the planes `depths` of `cam_ref`.
/// Cameras are full-resolution; feature pixel `x` corresponds to image
/// pixel `4x`.
pub fn build_sweep_volume<T: Real>(
    g: &mut Graph<T>,
    feat: Var,
    cam_i: &Camera,
    cam_ref: &Camera,
    depths: &[f64],
) -> Result<SweepVolume> {
    let s = g.shape(feat).to_vec();
    if s.len() != 3 {
        bail!(Dimension, "feature map must be [C, h, w], got {s:?}");
    }
    if depths.windows(2).any(|w| !(w[1] > w[0])) {
        bail!(Contract, "sweep depths must be strictly increasing");
    }
    let (h, w) = (s[1], s[2]);
    let (ci, cr) = (cam_i.downscaled(FEATURE_STRIDE as f64), cam_ref.downscaled(FEATURE_STRIDE as f64));
    let mut coords = Vec::with_capacity(depths.len() * h * w * 2);
    for &d in depths {
        let hm = plane_homography(&ci, &cr, d)?;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = apply_homography(&hm, x as f64, y as f64);
                coords.push(T::of(u));
                coords.push(T::of(v));
            }
        }
    }
    let coords = g.constant(Tensor::new(alloc::vec![depths.len() * h * w, 2], coords)?);
    let (samples, mask) = g.bilinear_sample(feat, coords)?;
    let volume = g.reshape(samples, &[s[0], depths.len(), h, w])?;
    Ok(SweepVolume { volume, mask })
}

/// Masked per-cell variance across views plus an "unobserved" flag channel:
/// `[C + 1, D, h, w]`.
pub fn cost_variance<T: Real>(g: &mut Graph<T>, volumes: &[SweepVolume]) -> Result<Var> {
    if volumes.is_empty() {
        bail!(Contract, "cost volume needs at least one sweep volume");
    }
    let vars: Vec<Var> = volumes.iter().map(|v| v.volume).collect();
    let masks: Vec<Vec<bool>> = volumes.iter().map(|v| v.mask.clone()).collect();
    g.masked_variance(&vars, &masks)
}

/// Three-level 3D UNet: two stride-2 downsamples, transposed-conv
/// upsamples, additive skips.
#[derive(Clone, Debug)]
pub struct UNet3d {
    enc0: (Conv, BatchNorm),
    down1: (Conv, BatchNorm),
    down2: (Conv, BatchNorm),
    up1: (ConvTranspose3d, BatchNorm),
    up0: (ConvTranspose3d, BatchNorm),
    out: Conv,
    pub skips: bool,
    pub out_channels: usize,
}

impl UNet3d {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, input: usize, widths: [usize; 3], output: usize) -> Result<Self> {
        let gv = Group::Volume;
        let [c0, c1, c2] = widths;
        let block = |ps: &mut ParamSet<T>, name: &str, ci, co, stride| -> Result<(Conv, BatchNorm)> {
            Ok((Conv::new3d(ps, gv, name, ci, co, 3, stride, 1, false)?, BatchNorm::new(ps, gv, &format!("{name}_bn"), co)?))
        };
        let enc0 = block(ps, "enc0", input, c0, 1)?;
        let down1 = block(ps, "down1", c0, c1, 2)?;
        let down2 = block(ps, "down2", c1, c2, 2)?;
        let up1 = (ConvTranspose3d::new(ps, gv, "up1", c2, c1, 2, 2, 0, false)?, BatchNorm::new(ps, gv, "up1_bn", c1)?);
        let up0 = (ConvTranspose3d::new(ps, gv, "up0", c1, c0, 2, 2, 0, false)?, BatchNorm::new(ps, gv, "up0_bn", c0)?);
        let out = Conv::new3d(ps, gv, "out", c0, output, 3, 1, 1, true)?;
        Ok(Self { enc0, down1, down2, up1, up0, out, skips: true, out_channels: output })
    }

    /// `cost [C_in, D, h, w]` to `[C_E, D, h, w]`. Spatial dims are
    /// zero-padded up to multiples of 4 and cropped back afterwards.
    pub fn forward<T: Real>(&self, f: &mut Forward<T>, cost: Var) -> Result<Var> {
        let s = f.g.shape(cost).to_vec();
        if s.len() != 4 {
            bail!(Dimension, "UNet expects [C, D, h, w], got {s:?}");
        }
        let padded: Vec<usize> = core::iter::once(s[0]).chain(s[1..].iter().map(|&n| n.div_ceil(4) * 4)).collect();
        let mut x = if padded != s { f.g.pad_end(cost, &padded)? } else { cost };
        x = f.g.reshape(x, &[1, padded[0], padded[1], padded[2], padded[3]])?;

        let block = |f: &mut Forward<T>, (conv, bn): &(Conv, BatchNorm), x| -> Result<Var> {
            let y = conv.forward(f, x)?;
            let y = bn.forward(f, y)?;
            Ok(f.g.relu(y))
        };
        let up = |f: &mut Forward<T>, (conv, bn): &(ConvTranspose3d, BatchNorm), x| -> Result<Var> {
            let y = conv.forward(f, x)?;
            let y = bn.forward(f, y)?;
            Ok(f.g.relu(y))
        };
        let e0 = block(f, &self.enc0, x)?;
        let e1 = block(f, &self.down1, e0)?;
        let e2 = block(f, &self.down2, e1)?;
        let mut u1 = up(f, &self.up1, e2)?;
        if self.skips {
            u1 = f.g.add(u1, e1)?;
        }
        let mut u0 = up(f, &self.up0, u1)?;
        if self.skips {
            u0 = f.g.add(u0, e0)?;
        }
        let y = self.out.forward(f, u0)?;
        let mut y = f.g.reshape(y, &[self.out_channels, padded[1], padded[2], padded[3]])?;
        for axis in 1..4 {
            if padded[axis] != s[axis] {
                y = f.g.slice(y, axis, 0, s[axis])?;
            }
        }
        Ok(y)
    }
}

/// The embedding volume `E` anchored at the reference camera frustum.
#[derive(Clone, Debug)]
pub struct EmbeddingVolume {
    /// `[C_E, D, h, w]`.
    pub volume: Var,
    pub reference: Camera,
    pub near: f64,
    pub far: f64,
    pub planes: usize,
}

impl EmbeddingVolume {
    /// Volume coordinates `(x, y, z)` of a world point: feature-grid pixel
    /// position and fractional plane index. Points behind the reference
    /// camera get NaN, which samples as out of bounds.
    pub fn coords(&self, p: &nalgebra::Vector3<f64>) -> [f64; 3] {
        let pr = self.reference.project(p);
        if !pr.in_front {
            return [f64::NAN; 3];
        }
        let s = FEATURE_STRIDE as f64;
        [pr.x / s, pr.y / s, plane_index(pr.depth, self.near, self.far, self.planes)]
    }
}
