//! Pinhole cameras, plane-induced homographies, rays and patch grids.
//!
//! Pixel centers sit at integer coordinates with the origin at the top-left
//! pixel. Camera frames have x right, y down, z forward.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use num_traits::Float;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Intrinsics in pixels.
    pub k: Matrix3<f64>,
    /// World-to-camera rotation; its rows are the camera axes in world space.
    pub r: Matrix3<f64>,
    /// World-to-camera translation: `X_cam = R X + t`.
    pub t: Vector3<f64>,
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    /// False when the point is on or behind the image plane; `x`, `y` are
    /// then meaningless.
    pub in_front: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Sample grid `(s*i + p_x, s*j + p_y)` for `i, j` in `-δ/2..=δ/2`, stored
/// row by row (`j` outer). A patch of size δ therefore has `δ + 1` samples
/// per side.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub center: (f64, f64),
    pub scale: f64,
    pub delta: usize,
    pub coords: Vec<(f64, f64)>,
}

impl PatchGrid {
    pub fn side(&self) -> usize {
        self.delta + 1
    }

    /// Half-extent in pixels, `s * δ / 2`.
    pub fn half_extent(&self) -> f64 {
        self.scale * self.delta as f64 / 2.0
    }
}

pub fn intrinsics(focal: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0)
}

impl Camera {
    /// Validates the rotation and intrinsics.
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(ortho < 1e-6) || !((r.determinant() - 1.0).abs() < 1e-6) {
            bail!(Domain, "rotation is not orthonormal with det +1");
        }
        let lower = [k[(1, 0)], k[(2, 0)], k[(2, 1)]];
        if lower.iter().any(|&v| v != 0.0) || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            bail!(Domain, "intrinsics must be upper-triangular with positive focal lengths");
        }
        Ok(Self { k, r, t })
    }

    /// Camera at `eye` looking at `target`, with image y aligned as closely
    /// as possible to world `down`.
    pub fn look_at(k: Matrix3<f64>, eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if !(z.norm() > 0.0) {
            bail!(Domain, "eye and target coincide");
        }
        let z = z.normalize();
        let x = down.cross(&z);
        if !(x.norm() > 1e-12) {
            bail!(Domain, "viewing direction is parallel to the down vector");
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(k, r, -(r * eye))
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Viewing direction in world space (third row of `R`).
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.r.row(2).transpose()
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        // upper-triangular with positive diagonal, always invertible
        self.k.try_inverse().expect("validated intrinsics")
    }

    /// Same pose with pixel coordinates divided by `factor`; pixel `x` maps
    /// to `x / factor` so integer-centered grids stay aligned.
    pub fn downscaled(&self, factor: f64) -> Self {
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] /= factor;
            k[(1, c)] /= factor;
        }
        Self { k, r: self.r, t: self.t }
    }

    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    pub fn project(&self, x: &Vector3<f64>) -> Projection {
        let c = self.k * self.to_camera_frame(x);
        let depth = c.z;
        if depth > 0.0 {
            Projection { x: c.x / depth, y: c.y / depth, depth, in_front: true }
        } else {
            Projection { x: f64::NAN, y: f64::NAN, depth, in_front: false }
        }
    }

    /// World point seen at pixel `(x, y)` with camera-frame depth `depth`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        let c = self.k_inv() * Vector3::new(x, y, 1.0) * depth;
        self.r.transpose() * (c - self.t)
    }

    /// Unit world-space direction through pixel `(x, y)`.
    pub fn pixel_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        (self.r.transpose() * self.k_inv() * Vector3::new(x, y, 1.0)).normalize()
    }

    /// Ray through a pixel whose parameter range covers camera-frame depths
    /// `near..far`.
    pub fn pixel_ray(&self, x: f64, y: f64, near: f64, far: f64) -> Ray {
        let direction = self.pixel_direction(x, y);
        let cos = direction.dot(&self.principal_axis());
        Ray { origin: self.center(), direction, t_near: near / cos, t_far: far / cos }
    }

    /// Angle in radians between the viewing directions of two cameras.
    pub fn angle_to(&self, other: &Camera) -> f64 {
        Float::acos(self.principal_axis().dot(&other.principal_axis()).clamp(-1.0, 1.0))
    }
}

/// Homography taking reference pixels to pixels of `cam_i` for points on the
/// plane at depth `d` in front of the reference camera:
/// `K_i (R_rel + t_rel n^T / d) K_ref^-1` with `n = (0, 0, 1)`.
pub fn plane_homography(cam_i: &Camera, cam_ref: &Camera, d: f64) -> Result<Matrix3<f64>> {
    if !(d > 0.0) {
        bail!(Domain, "plane depth must be positive, got {d}");
    }
    let r_rel = cam_i.r * cam_ref.r.transpose();
    let t_rel = cam_i.t - r_rel * cam_ref.t;
    let n = Vector3::new(0.0, 0.0, 1.0);
    Ok(cam_i.k * (r_rel + t_rel * n.transpose() / d) * cam_ref.k_inv())
}

/// Applies a homography to a pixel and dehomogenizes.
pub fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

pub fn patch_grid(center: (f64, f64), scale: f64, delta: usize) -> Result<PatchGrid> {
    if delta % 2 != 0 {
        bail!(Contract, "patch size must be even, got {delta}");
    }
    if !(scale > 0.0) {
        bail!(Contract, "patch scale must be positive, got {scale}");
    }
    let h = (delta / 2) as i64;
    let coords = (-h..=h)
        .flat_map(|j| (-h..=h).map(move |i| (scale * i as f64 + center.0, scale * j as f64 + center.1)))
        .collect();
    Ok(PatchGrid { center, scale, delta, coords })
}
