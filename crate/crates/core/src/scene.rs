//! Analytic ray-cast scenes: textured rectangles and spheres under one
//! directional light, rendered with Lambertian shading.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use num_traits::Float;

use crate::camera::{intrinsics, Camera};
use crate::error::{bail, Result};
use crate::image::{DepthMap, Image};

/// Procedural textures over surface coordinates `(u, v)` in scene units.
/// Each yields a blend factor in `[0, 1]` between two albedos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    /// Squares of side `period`.
    Checker { period: f64 },
    /// `0.5 + 0.5 sin(2π u / period)` bands along `u`.
    Stripes { period: f64 },
    /// Value noise: `octaves` layers of smoothly interpolated lattice
    /// values, the first with cell size `cell`, each next at half the cell
    /// size and half the amplitude.
    Noise { cell: f64, octaves: u32 },
}

impl Texture {
    pub fn id(&self) -> &'static str {
        match self {
            Texture::Checker { .. } => "checker",
            Texture::Stripes { .. } => "stripes",
            Texture::Noise { .. } => "noise",
        }
    }

    pub fn blend(&self, u: f64, v: f64, seed: u64) -> f64 {
        match *self {
            Texture::Checker { period } => {
                let k = Float::floor(u / period) as i64 + Float::floor(v / period) as i64;
                k.rem_euclid(2) as f64
            }
            Texture::Stripes { period } => 0.5 + 0.5 * Float::sin(core::f64::consts::TAU * u / period),
            Texture::Noise { cell, octaves } => {
                let (mut total, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0 / cell);
                for o in 0..octaves {
                    total += amp * value_noise(u * freq, v * freq, seed.wrapping_add(o as u64));
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                total / norm
            }
        }
    }
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    // splitmix64 finalizer over the packed lattice coordinate
    let mut z = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (Float::floor(x), Float::floor(y));
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(x - fx), smooth(y - fy));
    let top = lattice(ix, iy, seed) * (1.0 - sx) + lattice(ix + 1, iy, seed) * sx;
    let bottom = lattice(ix, iy + 1, seed) * (1.0 - sx) + lattice(ix + 1, iy + 1, seed) * sx;
    top * (1.0 - sy) + bottom * sy
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub texture: Texture,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
}

impl Material {
    pub fn albedo(&self, u: f64, v: f64, seed: u64) -> [f64; 3] {
        let f = self.texture.blend(u, v, seed);
        core::array::from_fn(|c| self.albedo_a[c] * (1.0 - f) + self.albedo_b[c] * f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Rectangle spanned by unit axes `u`, `v` around `center`.
    Rect { center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half_u: f64, half_v: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

/// Surface hit: ray parameter, world point, normal facing the ray, and
/// texture coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub uv: (f64, f64),
    pub primitive: usize,
}

const T_MIN: f64 = 1e-9;

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        match self.shape {
            Shape::Rect { u, v, half_u, half_v, .. } => {
                if !(half_u > 0.0 && half_v > 0.0) {
                    bail!(Domain, "rectangle extents must be positive");
                }
                if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
                    bail!(Domain, "rectangle axes must be orthonormal");
                }
            }
            Shape::Sphere { radius, .. } => {
                if !(radius > 0.0) {
                    bail!(Domain, "sphere radius must be positive");
                }
            }
        }
        match self.material.texture {
            Texture::Checker { period } | Texture::Stripes { period } if !(period > 0.0) => {
                bail!(Domain, "texture period must be positive")
            }
            Texture::Noise { cell, octaves } if !(cell > 0.0) || octaves == 0 => {
                bail!(Domain, "noise needs a positive cell and at least one octave")
            }
            _ => Ok(()),
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, (f64, f64))> {
        match self.shape {
            Shape::Rect { center, u, v, half_u, half_v } => {
                let n = u.cross(&v);
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (center - o).dot(&n) / denom;
                if t <= T_MIN {
                    return None;
                }
                let rel = o + d * t - center;
                let (a, b) = (rel.dot(&u), rel.dot(&v));
                (a.abs() <= half_u && b.abs() <= half_v).then_some((t, n, (a, b)))
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = Float::sqrt(disc);
                let t = if -b - s > T_MIN { -b - s } else { -b + s };
                if t <= T_MIN {
                    return None;
                }
                let n = (o + d * t - center) / radius;
                let uv = (Float::atan2(n.x, -n.z) * radius, Float::asin(n.y.clamp(-1.0, 1.0)) * radius);
                Some((t, n, uv))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    /// Unit vector pointing toward the light.
    pub light: Vector3<f64>,
    pub background: [f64; 3],
    pub seed: u64,
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub image: Image,
    /// Camera-frame depth of the visible surface; 0 where nothing was hit.
    pub depth: DepthMap,
    pub hit: Vec<bool>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        if (self.light.norm() - 1.0).abs() > 1e-9 {
            bail!(Domain, "light direction must be a unit vector");
        }
        Ok(())
    }

    /// Nearest intersection along `o + t d`, `t > 0`.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, n, uv)) = p.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    let normal = if n.dot(d) > 0.0 { -n } else { n };
                    best = Some(Hit { t, point: o + d * t, normal, uv, primitive: i });
                }
            }
        }
        best
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let albedo = self.primitives[hit.primitive].material.albedo(hit.uv.0, hit.uv.1, self.seed);
        let lambert = hit.normal.dot(&self.light).max(0.0);
        albedo.map(|a| a * lambert)
    }

    /// Hit seen through a continuous pixel position.
    pub fn trace_pixel(&self, cam: &Camera, x: f64, y: f64) -> Option<Hit> {
        self.trace(&cam.center(), &cam.pixel_direction(x, y))
    }

    pub fn render_view(&self, cam: &Camera, width: usize, height: usize) -> RenderedView {
        let mut image = Image::new(width, height);
        let mut depth = DepthMap::new(width, height);
        let mut hit = alloc::vec![false; width * height];
        let bg = self.background.map(|v| v as f32);
        for y in 0..height {
            for x in 0..width {
                match self.trace_pixel(cam, x as f64, y as f64) {
                    Some(h) => {
                        image.set_pixel(x, y, self.shade(&h).map(|v| v as f32));
                        depth.data[y * width + x] = cam.to_camera_frame(&h.point).z as f32;
                        hit[y * width + x] = true;
                    }
                    None => image.set_pixel(x, y, bg),
                }
            }
        }
        RenderedView { image, depth, hit }
    }

    /// Whether a nearer surface hides world point `x` from `cam`. Image
    /// bounds are ignored.
    pub fn occluded_from(&self, cam: &Camera, x: &Vector3<f64>) -> bool {
        let o = cam.center();
        let dist = (x - o).norm();
        match self.trace(&o, &((x - o) / dist)) {
            Some(h) => h.t < dist - 1e-6 * dist.max(1.0),
            None => false,
        }
    }

    /// Number of surface pixels of `target` hidden from every source camera
    /// by a nearer surface.
    pub fn occluded_in_all(&self, target: &Camera, sources: &[Camera], width: usize, height: usize) -> usize {
        let mut count = 0;
        for y in 0..height {
            for x in 0..width {
                if let Some(h) = self.trace_pixel(target, x as f64, y as f64) {
                    if sources.iter().all(|s| self.occluded_from(s, &h.point)) {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RigPattern {
    /// Horizontal arc around the vertical axis through the target.
    Arc,
    /// Rows of arcs at different elevations, filled row by row.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rig {
    pub pattern: RigPattern,
    pub n_views: usize,
    /// Angle in degrees between adjacent views.
    pub baseline_angle: f64,
    pub target: Vector3<f64>,
}

/// Pinhole intrinsics for a `width` x `height` image with the principal
/// point at the image center.
pub fn centered_intrinsics(width: usize, height: usize, focal: f64) -> Matrix3<f64> {
    intrinsics(focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Cameras at distance `radius` from the rig target, all looking at it. The
/// middle view of an arc sits at `target - radius * z`.
pub fn make_rig(rig: &Rig, radius: f64, k: Matrix3<f64>) -> Result<Vec<Camera>> {
    if rig.n_views == 0 {
        bail!(Domain, "a rig needs at least one view");
    }
    if !(rig.baseline_angle > 0.0) || !(radius > 0.0) {
        bail!(Domain, "baseline angle and radius must be positive");
    }
    let step = rig.baseline_angle.to_radians();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let eye = |azimuth: f64, elevation: f64| {
        let (sa, ca) = (Float::sin(azimuth), Float::cos(azimuth));
        let (se, ce) = (Float::sin(elevation), Float::cos(elevation));
        rig.target + Vector3::new(sa * ce, -se, -ca * ce) * radius
    };
    let offsets = |n: usize| (0..n).map(move |i| (i as f64 - (n as f64 - 1.0) / 2.0) * step);
    let angles: Vec<(f64, f64)> = match rig.pattern {
        RigPattern::Arc => offsets(rig.n_views).map(|a| (a, 0.0)).collect(),
        RigPattern::Grid => {
            let cols = Float::ceil(Float::sqrt(rig.n_views as f64)) as usize;
            let rows = rig.n_views.div_ceil(cols);
            offsets(rows).flat_map(|e| offsets(cols).map(move |a| (a, e))).take(rig.n_views).collect()
        }
    };
    angles.into_iter().map(|(a, e)| Camera::look_at(k, eye(a, e), rig.target, down)).collect()
}

/// Which views feed the encoder and which are rendered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub sources: Vec<usize>,
    pub train_targets: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Desk-scale dataset geometry shared by the presets.
pub const IMAGE_SIZE: usize = 32;
pub const FOCAL: f64 = 34.0;
pub const RIG_RADIUS: f64 = 4.0;
pub const NEAR: f64 = 2.0;
pub const FAR: f64 = 10.0;
pub const RIG_VIEWS: usize = 9;
pub const NARROW_BASELINE: f64 = 2.5;
pub const WIDE_BASELINE: f64 = 4.0;

impl Protocol {
    /// Interpolation: sources spread over the arc, targets between them.
    pub fn narrow() -> Self {
        Self { sources: alloc::vec![0, 4, 8], train_targets: alloc::vec![1, 3, 5, 7], heldout: alloc::vec![2, 6] }
    }

    /// Extrapolation: sources clustered at one end of the arc, held-out
    /// targets at the far end where the occluder hides background that no
    /// source sees.
    pub fn wide() -> Self {
        Self { sources: alloc::vec![0, 1, 2], train_targets: alloc::vec![3, 4, 5, 6], heldout: alloc::vec![7, 8] }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "narrow" => Ok(Self::narrow()),
            "wide" => Ok(Self::wide()),
            _ => bail!(Domain, "unknown protocol {name}"),
        }
    }

    pub fn baseline(name: &str) -> Result<f64> {
        match name {
            "narrow" => Ok(NARROW_BASELINE),
            "wide" => Ok(WIDE_BASELINE),
            _ => bail!(Domain, "unknown protocol {name}"),
        }
    }

    pub fn validate(&self, n_views: usize) -> Result<()> {
        let all = self.sources.iter().chain(&self.train_targets).chain(&self.heldout);
        if let Some(v) = all.clone().find(|&&v| v >= n_views) {
            bail!(Domain, "protocol references view {v} of {n_views}");
        }
        if self.sources.is_empty() {
            bail!(Domain, "protocol needs at least one source view");
        }
        if let Some(v) = self.train_targets.iter().chain(&self.heldout).find(|v| self.sources.contains(v)) {
            bail!(Contract, "target view {v} is also a source view");
        }
        Ok(())
    }
}

fn light() -> Vector3<f64> {
    Vector3::new(0.3, -0.5, -0.8).normalize()
}

fn rect(center: [f64; 3], half_u: f64, half_v: f64, material: Material) -> Primitive {
    Primitive {
        shape: Shape::Rect {
            center: Vector3::from(center),
            u: Vector3::new(1.0, 0.0, 0.0),
            v: Vector3::new(0.0, 1.0, 0.0),
            half_u,
            half_v,
        },
        material,
    }
}

fn sphere(center: [f64; 3], radius: f64, material: Material) -> Primitive {
    Primitive { shape: Shape::Sphere { center: Vector3::from(center), radius }, material }
}

fn backdrop(z: f64) -> Primitive {
    rect(
        [0.0, 0.0, z],
        12.0,
        12.0,
        Material {
            texture: Texture::Checker { period: 1.0 },
            albedo_a: [0.95, 0.85, 0.35],
            albedo_b: [0.2, 0.35, 0.9],
        },
    )
}

/// Foreground square occluding a checkered background plane.
pub fn two_planes(seed: u64) -> SceneSpec {
    let occluder = rect(
        [0.0, 0.0, -1.0],
        0.8,
        0.8,
        Material { texture: Texture::Stripes { period: 0.5 }, albedo_a: [0.95, 0.25, 0.2], albedo_b: [0.95, 0.95, 0.9] },
    );
    SceneSpec {
        name: "two-planes".to_string(),
        primitives: alloc::vec![backdrop(2.5), occluder],
        light: light(),
        background: [0.0; 3],
        seed,
    }
}

/// Noise-textured sphere in front of a checkered plane.
pub fn sphere_on_plane(seed: u64) -> SceneSpec {
    let ball = sphere(
        [0.0, 0.2, 0.0],
        1.1,
        Material {
            texture: Texture::Checker { period: 0.45 },
            albedo_a: [0.3, 0.85, 0.35],
            albedo_b: [0.95, 0.95, 0.95],
        },
    );
    SceneSpec {
        name: "sphere-on-plane".to_string(),
        primitives: alloc::vec![backdrop(2.0), ball],
        light: light(),
        background: [0.0; 3],
        seed,
    }
}

/// Two spheres and a small card at staggered depths.
pub fn triple_object(seed: u64) -> SceneSpec {
    let noise = Material { texture: Texture::Noise { cell: 0.4, octaves: 3 }, albedo_a: [0.9, 0.5, 0.1], albedo_b: [0.2, 0.1, 0.6] };
    let card = rect(
        [-0.9, 0.5, -0.8],
        0.5,
        0.5,
        Material { texture: Texture::Checker { period: 0.3 }, albedo_a: [0.9, 0.9, 0.9], albedo_b: [0.8, 0.2, 0.5] },
    );
    let ball = sphere(
        [0.9, -0.3, 0.5],
        0.8,
        Material { texture: Texture::Stripes { period: 0.4 }, albedo_a: [0.2, 0.8, 0.9], albedo_b: [0.95, 0.9, 0.3] },
    );
    SceneSpec {
        name: "triple-object".to_string(),
        primitives: alloc::vec![backdrop(2.5), sphere([-0.4, -0.6, 0.9], 0.6, noise), card, ball],
        light: light(),
        background: [0.0; 3],
        seed,
    }
}

pub const PRESETS: [&str; 3] = ["two-planes", "sphere-on-plane", "triple-object"];

pub fn preset(name: &str, seed: u64) -> Result<SceneSpec> {
    match name {
        "two-planes" => Ok(two_planes(seed)),
        "sphere-on-plane" => Ok(sphere_on_plane(seed)),
        "triple-object" => Ok(triple_object(seed)),
        _ => bail!(Domain, "unknown scene preset {name}"),
    }
}

/// A scene rendered from every camera of a rig, with its protocol.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: String,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub cameras: Vec<Camera>,
    pub views: Vec<RenderedView>,
    pub protocol: Protocol,
}

/// Renders a preset on the standard arc rig for the named protocol.
pub fn generate(name: &str, protocol: &str, seed: u64) -> Result<Dataset> {
    let spec = preset(name, seed)?;
    let rig = Rig {
        pattern: RigPattern::Arc,
        n_views: RIG_VIEWS,
        baseline_angle: Protocol::baseline(protocol)?,
        target: Vector3::zeros(),
    };
    build_dataset(&spec, &rig, Protocol::by_name(protocol)?, IMAGE_SIZE, IMAGE_SIZE)
}

pub fn build_dataset(spec: &SceneSpec, rig: &Rig, protocol: Protocol, width: usize, height: usize) -> Result<Dataset> {
    spec.validate()?;
    protocol.validate(rig.n_views)?;
    let cameras = make_rig(rig, RIG_RADIUS, centered_intrinsics(width, height, FOCAL * width as f64 / IMAGE_SIZE as f64))?;
    let views = cameras.iter().map(|c| spec.render_view(c, width, height)).collect();
    Ok(Dataset { scene: spec.name.clone(), width, height, near: NEAR, far: FAR, cameras, views, protocol })
}

impl Dataset {
    /// The source view whose viewing direction is angularly closest to
    /// `target`; ties go to the lowest view index.
    pub fn reference_for(&self, sources: &[usize], target: &Camera) -> usize {
        let mut best = sources[0];
        let mut best_angle = f64::INFINITY;
        for &s in sources {
            let a = self.cameras[s].angle_to(target);
            if a < best_angle - 1e-12 || ((a - best_angle).abs() <= 1e-12 && s < best) {
                best = s;
                best_angle = a;
            }
        }
        best
    }
}
