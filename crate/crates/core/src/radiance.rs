//! Radiance field decoding and volume compositing.
//!
//! A world point is described to the MLP by its positional encoding, the
//! encoded ray direction, the source-view colors it projects to (with
//! in-view flags), and a trilinear sample of the embedding volume (with an
//! in-frustum flag). The MLP returns density through softplus and color
//! through sigmoid.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::Vector3;
use num_traits::Float;
use rand::Rng;

use crate::camera::{Camera, PatchGrid, Ray};
use crate::error::{bail, Result};
use crate::image::Image;
use crate::nn::{Forward, Linear};
use crate::psv::EmbeddingVolume;
use crate::tensor::{Graph, Group, ParamSet, Tensor, Var};
use crate::Real;

/// Denominator floor of the expected depth.
pub const DEPTH_EPS: f64 = 1e-8;

/// Width of a 3-vector after encoding with `bands` frequency bands.
pub fn encoded_width(bands: usize) -> usize {
    3 + 6 * bands
}

/// `v` followed by `sin(2^k π v)`, `cos(2^k π v)` for `k < bands`.
pub fn positional_encoding(v: &Vector3<f64>, bands: usize, out: &mut Vec<f64>) {
    out.extend(v.iter());
    let mut freq = core::f64::consts::PI;
    for _ in 0..bands {
        for &x in v.iter() {
            out.push(Float::sin(freq * x));
        }
        for &x in v.iter() {
            out.push(Float::cos(freq * x));
        }
        freq *= 2.0;
    }
}

/// A posed source image used for color conditioning.
#[derive(Clone, Copy, Debug)]
pub struct SourceView<'a> {
    pub camera: &'a Camera,
    pub image: &'a Image,
}

/// Bilinear color lookup at a continuous pixel position; `None` outside
/// the image.
pub fn sample_color(image: &Image, x: f64, y: f64) -> Option<[f64; 3]> {
    let (w, h) = (image.width, image.height);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (Float::floor(x) as usize).min(w.saturating_sub(2));
    let y0 = (Float::floor(y) as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| image.pixel(xx, yy).map(|v| v as f64);
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    Some(core::array::from_fn(|ch| {
        (1.0 - fy) * ((1.0 - fx) * a[ch] + fx * b[ch]) + fy * ((1.0 - fx) * c[ch] + fx * d[ch])
    }))
}

#[derive(Clone, Debug)]
pub struct RadianceNet {
    hidden: Vec<Linear>,
    head: Linear,
    pub pe_x: usize,
    pub pe_d: usize,
    /// World coordinates are multiplied by this before encoding.
    pub pe_scale: f64,
    pub embed: usize,
    pub sources: usize,
}

impl RadianceNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        pe_x: usize,
        pe_d: usize,
        pe_scale: f64,
        embed: usize,
        sources: usize,
        width: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            bail!(Domain, "radiance MLP needs at least one hidden layer");
        }
        let input = Self::input_width_for(pe_x, pe_d, embed, sources);
        let mut hidden = Vec::new();
        for i in 0..layers {
            hidden.push(Linear::new(ps, Group::Field, &format!("fc{i}"), if i == 0 { input } else { width }, width)?);
        }
        let head = Linear::new(ps, Group::Field, "head", width, 4)?;
        Ok(Self { hidden, head, pe_x, pe_d, pe_scale, embed, sources })
    }

    fn input_width_for(pe_x: usize, pe_d: usize, embed: usize, sources: usize) -> usize {
        encoded_width(pe_x) + encoded_width(pe_d) + 4 * sources + embed + 1
    }

    /// Encoded position and direction, `3N` source colors, `N` source
    /// flags, `C_E` embedding values and the embedding flag.
    pub fn input_width(&self) -> usize {
        Self::input_width_for(self.pe_x, self.pe_d, self.embed, self.sources)
    }

    /// Per-point inputs that do not depend on parameters, row-major
    /// `[K, width - C_E - 1]`.
    pub fn constant_features(&self, points: &[Vector3<f64>], dirs: &[Vector3<f64>], sources: &[SourceView]) -> Result<Vec<f64>> {
        if sources.len() != self.sources {
            bail!(Contract, "field was built for {} source views, got {}", self.sources, sources.len());
        }
        let width = self.input_width() - self.embed - 1;
        let mut out = Vec::with_capacity(points.len() * width);
        for (p, d) in points.iter().zip(dirs) {
            positional_encoding(&(p * self.pe_scale), self.pe_x, &mut out);
            positional_encoding(d, self.pe_d, &mut out);
            let mut flags = Vec::with_capacity(sources.len());
            for s in sources {
                let pr = s.camera.project(p);
                let rgb = if pr.in_front { sample_color(s.image, pr.x, pr.y) } else { None };
                out.extend(rgb.unwrap_or([0.0; 3]));
                flags.push(rgb.is_some() as u8 as f64);
            }
            out.extend(flags);
        }
        Ok(out)
    }

    /// Density `[K]` and color `[K, 3]` at `K` points.
    pub fn query<T: Real>(
        &self,
        f: &mut Forward<T>,
        embedding: &EmbeddingVolume,
        points: &[Vector3<f64>],
        dirs: &[Vector3<f64>],
        sources: &[SourceView],
    ) -> Result<(Var, Var)> {
        let k = points.len();
        let consts = self.constant_features(points, dirs, sources)?;
        let cw = consts.len() / k.max(1);
        let coords: Vec<T> = points.iter().flat_map(|p| embedding.coords(p)).map(T::of).collect();
        let coords = f.g.constant(Tensor::new(alloc::vec![k, 3], coords)?);
        let (e, mask) = f.g.trilinear_sample(embedding.volume, coords)?;
        let e = f.g.transpose(e)?;
        let flags = f.g.constant(Tensor::new(alloc::vec![k, 1], mask.iter().map(|&m| T::of(m as u8 as f64)).collect())?);
        let c = f.g.constant(Tensor::new(alloc::vec![k, cw], consts.into_iter().map(T::of).collect())?);
        let x = f.g.concat(&[c, flags, e], 1)?;
        self.decode(f, x)
    }

    /// MLP on raw inputs `[K, input_width]`.
    pub fn decode<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(f, h)?;
            h = f.g.relu(h);
        }
        let out = self.head.forward(f, h)?;
        let out = f.g.transpose(out)?;
        let sigma = f.g.slice(out, 0, 0, 1)?;
        let sigma = f.g.softplus(sigma);
        let k = f.g.shape(sigma)[1];
        let sigma = f.g.reshape(sigma, &[k])?;
        let rgb = f.g.slice(out, 0, 1, 3)?;
        let rgb = f.g.sigmoid(rgb);
        let rgb = f.g.transpose(rgb)?;
        Ok((sigma, rgb))
    }
}

/// Sample distances along one ray and the interval each sample stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// `count` samples spanning `[t_near, t_far]` at constant spacing. With a
/// jitter source, interior samples move uniformly within half a spacing
/// either side, keeping their order.
pub fn march_ray<R: Rng + ?Sized>(ray: &Ray, count: usize, jitter: Option<&mut R>) -> Result<RaySamples> {
    if count < 2 {
        bail!(Contract, "ray marching needs at least two samples, got {count}");
    }
    let step = (ray.t_far - ray.t_near) / (count - 1) as f64;
    let mut t: Vec<f64> = (0..count).map(|k| ray.t_near + step * k as f64).collect();
    t[count - 1] = ray.t_far;
    if let Some(rng) = jitter {
        for v in &mut t[1..count - 1] {
            *v += (rng.gen::<f64>() - 0.5) * step;
        }
    }
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(step);
    Ok(RaySamples { t, delta })
}

/// Plain-number compositing of one ray, the reference for the graph version.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarComposite {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub depth: f64,
}

/// `w_γ = τ_γ (1 - exp(-σ_γ Δ_γ))` with `τ_γ = exp(-Σ_{j<γ} σ_j Δ_j)`.
pub fn composite_scalar(sigma: &[f64], rgb: &[[f64; 3]], t: &[f64], delta: &[f64]) -> ScalarComposite {
    let mut acc = 0.0;
    let (mut weights, mut transmittance) = (Vec::new(), Vec::new());
    let mut color = [0.0; 3];
    let (mut wsum, mut wt) = (0.0, 0.0);
    for g in 0..sigma.len() {
        let tau = Float::exp(-acc);
        let tau_alpha = tau * (1.0 - Float::exp(-sigma[g] * delta[g]));
        let w = if tau_alpha.is_nan() { 0.0 } else { tau_alpha };
        acc += sigma[g] * delta[g];
        for c in 0..3 {
            color[c] += w * rgb[g][c];
        }
        wsum += w;
        wt += w * t[g];
        weights.push(w);
        transmittance.push(tau);
    }
    ScalarComposite { color, weights, transmittance, depth: wt / wsum.max(DEPTH_EPS) }
}

/// Graph compositing results for `R` rays of `G` samples.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[3, R]`.
    pub color: Var,
    /// Expected ray distance `[R]`.
    pub depth: Var,
    /// `[R, G]`.
    pub weights: Var,
    /// `[R, G]`.
    pub transmittance: Var,
}

/// Composites `sigma [R, G]` and `rgb [R*G, 3]` given sample distances and
/// intervals `[R, G]`.
pub fn composite<T: Real>(g: &mut Graph<T>, sigma: Var, rgb: Var, t: &Tensor<T>, delta: &Tensor<T>) -> Result<Composite> {
    let s = g.shape(sigma).to_vec();
    if s.len() != 2 || t.shape() != s.as_slice() || delta.shape() != s.as_slice() {
        bail!(Dimension, "composite of sigma {s:?} with t {:?} and delta {:?}", t.shape(), delta.shape());
    }
    let (r, n) = (s[0], s[1]);
    let dv = g.constant(delta.clone());
    let tv = g.constant(t.clone());
    let optical = g.mul(sigma, dv)?;
    let acc = g.exclusive_cumsum(optical);
    let neg = g.neg(acc);
    let transmittance = g.exp(neg);
    let neg_opt = g.neg(optical);
    let keep = g.exp(neg_opt);
    let alpha = g.neg(keep);
    let alpha = g.add_scalar(alpha, T::one());
    let weights = g.mul(transmittance, alpha)?;

    let rgb_t = g.transpose(rgb)?;
    let rgb_t = g.reshape(rgb_t, &[3, r, n])?;
    let w1 = g.reshape(weights, &[1, r, n])?;
    let w3 = g.concat(&[w1, w1, w1], 0)?;
    let weighted = g.mul(w3, rgb_t)?;
    let color = g.sum_axis(weighted, 2)?;

    let wsum = g.sum_axis(weights, 1)?;
    let wt = g.mul(weights, tv)?;
    let wt = g.sum_axis(wt, 1)?;
    let denom = g.max_scalar(wsum, T::of(DEPTH_EPS));
    let depth = g.div(wt, denom)?;
    Ok(Composite { color, depth, weights, transmittance })
}

/// Everything the field needs to render rays for one target.
#[derive(Clone, Copy)]
pub struct RenderContext<'a> {
    pub net: &'a RadianceNet,
    pub embedding: &'a EmbeddingVolume,
    pub sources: &'a [SourceView<'a>],
    pub samples: usize,
}

pub fn render_rays<T: Real, R: Rng + ?Sized>(
    f: &mut Forward<T>,
    ctx: &RenderContext,
    rays: &[Ray],
    mut jitter: Option<&mut R>,
) -> Result<Composite> {
    let n = ctx.samples;
    let mut points = Vec::with_capacity(rays.len() * n);
    let mut dirs = Vec::with_capacity(rays.len() * n);
    let (mut ts, mut deltas) = (Vec::with_capacity(rays.len() * n), Vec::with_capacity(rays.len() * n));
    for ray in rays {
        let s = march_ray(ray, n, jitter.as_deref_mut())?;
        for &t in &s.t {
            points.push(ray.at(t));
            dirs.push(ray.direction);
        }
        ts.extend(s.t.iter().map(|&v| T::of(v)));
        deltas.extend(s.delta.iter().map(|&v| T::of(v)));
    }
    let (sigma, rgb) = ctx.net.query(f, ctx.embedding, &points, &dirs, ctx.sources)?;
    let sigma = f.g.reshape(sigma, &[rays.len(), n])?;
    let t = Tensor::new(alloc::vec![rays.len(), n], ts)?;
    let delta = Tensor::new(alloc::vec![rays.len(), n], deltas)?;
    composite(f.g, sigma, rgb, &t, &delta)
}

/// Rendered patch: colors `[3, side, side]`, expected ray distance
/// `[side, side]`, compositing weights `[side*side, G]`.
#[derive(Clone, Debug)]
pub struct PatchRender {
    pub color: Var,
    pub depth: Var,
    pub weights: Var,
    pub side: usize,
}

/// One ray per patch coordinate from the target camera.
#[allow(clippy::too_many_arguments)]
pub fn render_patch<T: Real, R: Rng + ?Sized>(
    f: &mut Forward<T>,
    ctx: &RenderContext,
    target: &Camera,
    patch: &PatchGrid,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    jitter: Option<&mut R>,
) -> Result<PatchRender> {
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    if patch.coords.iter().any(|&(x, y)| !(x >= 0.0 && y >= 0.0 && x <= wmax && y <= hmax)) {
        bail!(Contract, "patch around ({}, {}) at scale {} leaves the image", patch.center.0, patch.center.1, patch.scale);
    }
    let rays: Vec<Ray> = patch.coords.iter().map(|&(x, y)| target.pixel_ray(x, y, near, far)).collect();
    let c = render_rays(f, ctx, &rays, jitter)?;
    let side = patch.side();
    Ok(PatchRender {
        color: f.g.reshape(c.color, &[3, side, side])?,
        depth: f.g.reshape(c.depth, &[side, side])?,
        weights: c.weights,
        side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::patch_grid;
    use crate::gradcheck;
    use crate::nn::Mode;
    use crate::scene::{centered_intrinsics, make_rig, Rig, RigPattern};
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph_composite(sigma: &[f64], rgb: &[[f64; 3]], t: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>, f64, Vec<f64>) {
        let n = sigma.len();
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::new(vec![1, n], sigma.to_vec()).unwrap());
        let c = g.constant(Tensor::new(vec![n, 3], rgb.iter().flatten().copied().collect()).unwrap());
        let t = Tensor::new(vec![1, n], t.to_vec()).unwrap();
        let d = Tensor::new(vec![1, n], delta.to_vec()).unwrap();
        let out = composite(&mut g, s, c, &t, &d).unwrap();
        (g.value(out.color).to_vec(), g.value(out.weights).to_vec(), g.value(out.depth)[0], g.value(out.transmittance).to_vec())
    }

    #[test]
    fn compositing_oracles() {
        let rgb = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = [2.0, 3.0, 4.0];
        let one = [1.0; 3];

        let (color, w, _, tau) = graph_composite(&[0.0; 3], &rgb, &t, &one);
        assert_eq!(color, vec![0.0; 3]);
        assert_eq!(w, vec![0.0; 3]);
        assert_eq!(tau, vec![1.0; 3]);

        let (color, w, depth, _) = graph_composite(&[1e9, 0.5, 0.5], &rgb, &t, &one);
        assert!((color[0] - 1.0).abs() < 1e-12 && color[1].abs() < 1e-12 && color[2].abs() < 1e-12);
        assert!((w[0] - 1.0).abs() < 1e-12 && (depth - 2.0).abs() < 1e-12);

        let ln2 = core::f64::consts::LN_2;
        let (color, w, depth, tau) = graph_composite(&[ln2, ln2, 0.0], &rgb, &t, &one);
        for (a, b) in w.iter().zip([0.5, 0.25, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in color.iter().zip([0.5, 0.25, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tau.iter().zip([1.0, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((depth - (0.5 * 2.0 + 0.25 * 3.0) / 0.75).abs() < 1e-12);

        let reference = composite_scalar(&[ln2, ln2, 0.0], &rgb, &t, &one);
        assert!(reference.weights.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((reference.depth - depth).abs() < 1e-12);
    }

    #[test]
    fn compositing_properties_hold_on_random_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..24);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 5.0).collect();
            let rgb: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let delta: Vec<f64> = (0..n).map(|_| 0.01 + rng.gen::<f64>()).collect();
            let t: Vec<f64> = delta.iter().scan(2.0, |acc, d| { let v = *acc; *acc += d; Some(v) }).collect();
            let (color, w, depth, tau) = graph_composite(&sigma, &rgb, &t, &delta);
            assert!(tau.windows(2).all(|p| p[1] <= p[0]));
            let total: f64 = w.iter().sum();
            assert!(w.iter().all(|&x| x >= 0.0) && total <= 1.0 + 1e-12);
            assert!(color.iter().all(|&c| (0.0..=1.0 + 1e-12).contains(&c)));
            if total > 1e-6 {
                assert!(depth >= t[0] - 1e-9 && depth <= t[n - 1] + 1e-9);
            }
            let oracle = composite_scalar(&sigma, &rgb, &t, &delta);
            for c in 0..3 {
                assert!((oracle.color[c] - color[c]).abs() < 1e-12);
            }
            // zero-density samples appended at the far end change nothing
            let mut s2 = sigma.clone();
            s2.extend([0.0; 3]);
            let mut r2 = rgb.clone();
            r2.extend([[0.3; 3]; 3]);
            let mut d2 = delta.clone();
            d2.extend([0.5; 3]);
            let mut t2 = t.clone();
            t2.extend([100.0, 101.0, 102.0]);
            let (c2, _, depth2, _) = graph_composite(&s2, &r2, &t2, &d2);
            assert!(c2.iter().zip(&color).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((depth2 - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn vanishing_density_gives_black_with_floored_depth() {
        let (color, w, depth, _) = graph_composite(&[1e-30; 4], &[[1.0; 3]; 4], &[2.0, 3.0, 4.0, 5.0], &[1.0; 4]);
        assert!(color.iter().all(|&c| c < 1e-20) && w.iter().all(|&x| x < 1e-20));
        assert!(depth.is_finite());
    }

    #[test]
    fn marching_cases() {
        let ray = Ray { origin: Vector3::zeros(), direction: Vector3::z(), t_near: 2.0, t_far: 6.0 };
        let s = march_ray::<ChaCha8Rng>(&ray, 2, None).unwrap();
        assert_eq!(s.t, vec![2.0, 6.0]);
        let s = march_ray::<ChaCha8Rng>(&ray, 5, None).unwrap();
        assert_eq!(s.t, vec![2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.delta, vec![1.0; 5]);
        assert_eq!(s, march_ray::<ChaCha8Rng>(&ray, 5, None).unwrap());
        assert!(matches!(march_ray::<ChaCha8Rng>(&ray, 1, None), Err(crate::Error::Contract(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let s = march_ray(&ray, 9, Some(&mut rng)).unwrap();
            assert!(s.t.windows(2).all(|p| p[1] >= p[0]));
            assert_eq!((s.t[0], s.t[8]), (2.0, 6.0));
            assert!(s.delta.iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn encoding_layout() {
        let mut out = Vec::new();
        positional_encoding(&Vector3::new(0.25, 0.0, -0.5), 2, &mut out);
        assert_eq!(out.len(), encoded_width(2));
        let pi = core::f64::consts::PI;
        assert_eq!(&out[..3], &[0.25, 0.0, -0.5]);
        assert!((out[3] - (pi * 0.25).sin()).abs() < 1e-15);
        assert!((out[6] - (pi * 0.25).cos()).abs() < 1e-15);
        assert!((out[9] - (2.0 * pi * 0.25).sin()).abs() < 1e-15);
    }

    #[test]
    fn color_lookup_interpolates() {
        let img = Image::from_data(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(sample_color(&img, 0.5, 0.5), Some([0.5; 3]));
        assert_eq!(sample_color(&img, 1.0, 1.0), Some([1.0; 3]));
        assert_eq!(sample_color(&img, 1.01, 0.0), None);
        assert_eq!(sample_color(&img, f64::NAN, 0.0), None);
    }

    struct Fixture {
        params: ParamSet<f64>,
        net: RadianceNet,
        cameras: Vec<Camera>,
        images: Vec<Image>,
        embed: Tensor<f64>,
    }

    fn fixture() -> Fixture {
        let mut params = ParamSet::new(11);
        let net = RadianceNet::new(&mut params, 2, 1, 0.5, 3, 2, 16, 2).unwrap();
        let rig = Rig { pattern: RigPattern::Arc, n_views: 3, baseline_angle: 5.0, target: Vector3::zeros() };
        let cameras = make_rig(&rig, 4.0, centered_intrinsics(16, 16, 17.0)).unwrap();
        let images = (0..2)
            .map(|v| Image::from_data(16, 16, (0..16 * 16 * 3).map(|i| ((i * 7 + v * 13) % 23) as f32 / 23.0).collect()).unwrap())
            .collect();
        let embed = Tensor::from_fn(&[3, 4, 4, 4], |i| (((i * 29) % 17) as f64 / 17.0) - 0.5);
        Fixture { params, net, cameras, images, embed }
    }

    fn render_fixture(g: &mut Graph<f64>, fx: &Fixture, ps: &ParamSet<f64>, bound: &crate::tensor::Bound, patch: &PatchGrid) -> Result<PatchRender> {
        let volume = g.constant(fx.embed.clone());
        let embedding = EmbeddingVolume { volume, reference: fx.cameras[0].clone(), near: 2.0, far: 10.0, planes: 4 };
        let sources: Vec<SourceView> = (0..2).map(|i| SourceView { camera: &fx.cameras[i], image: &fx.images[i] }).collect();
        let ctx = RenderContext { net: &fx.net, embedding: &embedding, sources: &sources, samples: 6 };
        let mut f = Forward::new(g, ps, bound, Mode::Train);
        render_patch::<f64, ChaCha8Rng>(&mut f, &ctx, &fx.cameras[2], patch, 16, 16, 2.0, 10.0, None)
    }

    #[test]
    fn field_outputs_are_in_range() {
        let fx = fixture();
        let mut g = Graph::new();
        let bound = fx.params.bind(&mut g, |_| false);
        let volume = g.constant(fx.embed.clone());
        let embedding = EmbeddingVolume { volume, reference: fx.cameras[0].clone(), near: 2.0, far: 10.0, planes: 4 };
        let sources: Vec<SourceView> = (0..2).map(|i| SourceView { camera: &fx.cameras[i], image: &fx.images[i] }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vector3<f64>> = (0..1000).map(|_| Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..6.0))).collect();
        let dirs: Vec<Vector3<f64>> = points.iter().map(|_| Vector3::new(rng.gen(), rng.gen(), 1.0).normalize()).collect();
        let mut f = Forward::new(&mut g, &fx.params, &bound, Mode::Train);
        assert_eq!(fx.net.input_width(), encoded_width(2) + encoded_width(1) + 8 + 3 + 1);
        let (sigma, rgb) = fx.net.query(&mut f, &embedding, &points, &dirs, &sources).unwrap();
        assert_eq!(f.g.shape(sigma), &[1000]);
        assert_eq!(f.g.shape(rgb), &[1000, 3]);
        assert!(f.g.value(sigma).iter().all(|&s| s >= 0.0 && s.is_finite()));
        assert!(f.g.value(rgb).iter().all(|&c| c > 0.0 && c < 1.0));
        assert!(fx.net.constant_features(&points[..1], &dirs[..1], &sources[..1]).is_err());
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let fx = fixture();
        let sources: Vec<SourceView> = (0..2).map(|i| SourceView { camera: &fx.cameras[i], image: &fx.images[i] }).collect();
        let points = [Vector3::new(0.1, -0.2, 0.3), Vector3::new(-0.4, 0.2, 1.0), Vector3::new(0.0, 0.0, -0.5)];
        let dirs = [Vector3::z(); 3];
        let ids: Vec<_> = fx.params.ids().collect();
        let report = gradcheck::check_params(&fx.params, &ids, 6, |g, ps, bound| {
            let volume = g.constant(fx.embed.clone());
            let embedding = EmbeddingVolume { volume, reference: fx.cameras[0].clone(), near: 2.0, far: 10.0, planes: 4 };
            let mut f = Forward::new(g, ps, bound, Mode::Train);
            let (sigma, _) = fx.net.query(&mut f, &embedding, &points, &dirs, &sources)?;
            gradcheck::weighted_sum(f.g, sigma)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn patch_render_matches_per_ray_rendering() {
        let fx = fixture();
        let patch = patch_grid((7.5, 7.0), 1.5, 2).unwrap();
        let mut g = Graph::new();
        let bound = fx.params.bind(&mut g, |_| false);
        let r = render_fixture(&mut g, &fx, &fx.params, &bound, &patch).unwrap();
        assert_eq!(g.shape(r.color), &[3, 3, 3]);
        assert_eq!(g.shape(r.depth), &[3, 3]);
        assert_eq!(g.shape(r.weights), &[9, 6]);
        let colors = g.value(r.color).to_vec();
        let depths = g.value(r.depth).to_vec();

        let volume = g.constant(fx.embed.clone());
        let embedding = EmbeddingVolume { volume, reference: fx.cameras[0].clone(), near: 2.0, far: 10.0, planes: 4 };
        let sources: Vec<SourceView> = (0..2).map(|i| SourceView { camera: &fx.cameras[i], image: &fx.images[i] }).collect();
        let ctx = RenderContext { net: &fx.net, embedding: &embedding, sources: &sources, samples: 6 };
        let mut f = Forward::new(&mut g, &fx.params, &bound, Mode::Train);
        for (k, &(x, y)) in patch.coords.iter().enumerate() {
            let ray = fx.cameras[2].pixel_ray(x, y, 2.0, 10.0);
            let c = render_rays::<f64, ChaCha8Rng>(&mut f, &ctx, &[ray], None).unwrap();
            let col = f.g.value(c.color).to_vec();
            for ch in 0..3 {
                assert!((col[ch] - colors[ch * 9 + k]).abs() < 1e-12);
            }
            assert!((f.g.value(c.depth)[0] - depths[k]).abs() < 1e-12);
        }

        let outside = patch_grid((1.0, 8.0), 1.5, 2).unwrap();
        assert!(matches!(render_fixture(&mut g, &fx, &fx.params, &bound, &outside), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn patch_loss_gradient_matches_finite_differences() {
        let fx = fixture();
        let patch = patch_grid((8.0, 8.0), 2.0, 2).unwrap();
        let target = Tensor::from_fn(&[3, 3, 3], |i| (i % 5) as f64 / 5.0);
        let ids: Vec<_> = fx.params.ids().collect();
        let report = gradcheck::check_params(&fx.params, &ids, 4, |g, ps, bound| {
            let r = render_fixture(g, &fx, ps, bound, &patch)?;
            let t = g.constant(target.clone());
            let d = g.sub(r.color, t)?;
            let sq = g.square(d);
            let a = g.sum(sq);
            let b = gradcheck::weighted_sum(g, r.depth)?;
            let b = g.scale(b, 0.01);
            g.add(a, b)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
