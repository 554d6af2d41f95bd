//! Reconstruction, edge-aware depth smoothness, ray distortion, and the
//! weighted total.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{bail, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::Real;

/// Loss weights. The adversarial weight multiplies the raw generator term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub smooth: f64,
    pub dist: f64,
    pub adv: f64,
    pub perceptual: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 20.0, smooth: 0.4, dist: 0.001, adv: 0.1, perceptual: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.rec, self.smooth, self.dist, self.adv].iter().any(|w| !(*w >= 0.0)) {
            bail!(Domain, "loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn loss_rec<T: Real>(g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let n = g.value(d).len();
    let s = g.l1(d);
    Ok(g.scale(s, T::of(1.0 / n as f64)))
}

/// Per-pixel weights `exp(-‖∂I‖)` over the `(h-1) x (w-1)` interior for
/// forward differences along x and y of a `[3, h, w]` color patch.
pub fn edge_weights<T: Real>(color: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = color.shape();
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        bail!(Contract, "smoothness needs a [C, h, w] patch of at least 2x2, got {s:?}");
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let at = |ch: usize, y: usize, x: usize| color.data()[(ch * h + y) * w + x].as_f64();
    let weight = |dy: usize, dx: usize| {
        Tensor::from_fn(&[h - 1, w - 1], |i| {
            let (y, x) = (i / (w - 1), i % (w - 1));
            let sq: f64 = (0..c).map(|ch| (at(ch, y + dy, x + dx) - at(ch, y, x)).powi(2)).sum();
            T::of(Float::exp(-Float::sqrt(sq)))
        })
    };
    Ok((weight(0, 1), weight(1, 0)))
}

/// `(1/N) Σ |∂x d| e^{-‖∂x I‖} + |∂y d| e^{-‖∂y I‖}` over the interior of a
/// `[h, w]` depth patch, with the color patch treated as a constant.
pub fn loss_smooth<T: Real>(g: &mut Graph<T>, depth: Var, color: &Tensor<T>) -> Result<Var> {
    let s = g.shape(depth).to_vec();
    if s.len() != 2 || color.shape().get(1..) != Some(s.as_slice()) {
        bail!(Contract, "depth patch {s:?} does not match color patch {:?}", color.shape());
    }
    let (wx, wy) = edge_weights(color)?;
    let (h, w) = (s[0], s[1]);
    let diff = |g: &mut Graph<T>, axis: usize| -> Result<Var> {
        let n = s[axis] - 1;
        let hi = g.slice(depth, axis, 1, n)?;
        let lo = g.slice(depth, axis, 0, n)?;
        let d = g.sub(hi, lo)?;
        // keep the (h-1) x (w-1) interior
        let other = 1 - axis;
        let d = g.slice(d, other, 0, s[other] - 1)?;
        Ok(g.abs(d))
    };
    let dx = diff(g, 1)?;
    let dy = diff(g, 0)?;
    let (wx, wy) = (g.constant(wx), g.constant(wy));
    let tx = g.mul(dx, wx)?;
    let ty = g.mul(dy, wy)?;
    let t = g.add(tx, ty)?;
    let total = g.sum(t);
    Ok(g.scale(total, T::of(1.0 / ((h - 1) * (w - 1)) as f64)))
}

/// Per ray `Σ_{i≠j} w_i w_j + (1/3) Σ w_i² = (Σw)² - (2/3) Σw²`, averaged
/// over the rays of `weights [R, G]`.
pub fn loss_dist<T: Real>(g: &mut Graph<T>, weights: Var) -> Result<Var> {
    if g.shape(weights).len() != 2 {
        bail!(Dimension, "distortion expects [rays, samples], got {:?}", g.shape(weights));
    }
    let total = g.sum_axis(weights, 1)?;
    let total_sq = g.square(total);
    let sq = g.square(weights);
    let self_term = g.sum_axis(sq, 1)?;
    let self_term = g.scale(self_term, T::of(2.0 / 3.0));
    let per_ray = g.sub(total_sq, self_term)?;
    Ok(g.mean(per_ray))
}

/// A differentiable patch-pair functional standing in for a perceptual loss.
pub trait PerceptualLoss<T: Real> {
    fn eval(&self, g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var>;
}

/// Training-free proxy: L1 distance between gradient magnitudes at full
/// and half resolution, averaged over scales.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientMagnitudeL1;

const GRAD_EPS: f64 = 1e-6;

fn gradient_magnitude<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    // channels as batch: [3, 1, h, w]
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], 1, s[1], s[2]])?;
    let k = g.constant(Tensor::new(alloc::vec![2, 1, 2, 2], [-1.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0].map(T::of).to_vec())?);
    let d = g.conv2d(x, k, 1, 0)?;
    let sq = g.square(d);
    let sum = g.sum_axis(sq, 1)?;
    let sum = g.add_scalar(sum, T::of(GRAD_EPS));
    Ok(g.sqrt(sum))
}

fn half_resolution<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x4 = g.reshape(x, &[s[0], 1, s[1], s[2]])?;
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], T::of(0.25)));
    let y = g.conv2d(x4, k, 2, 0)?;
    let t = g.shape(y).to_vec();
    g.reshape(y, &[s[0], t[2], t[3]])
}

impl<T: Real> PerceptualLoss<T> for GradientMagnitudeL1 {
    fn eval(&self, g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var> {
        let mut terms = Vec::new();
        let (mut p, mut t) = (pred, truth);
        for scale in 0..2 {
            if scale > 0 {
                if g.shape(p)[1] < 4 {
                    break;
                }
                p = half_resolution(g, p)?;
                t = half_resolution(g, t)?;
            }
            let gp = gradient_magnitude(g, p)?;
            let gt = gradient_magnitude(g, t)?;
            terms.push(loss_rec(g, gp, gt)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, T::of(1.0 / terms.len() as f64)))
    }
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub d: f64,
    /// `mean((1 - D(fake))^2)` before the adversarial weight.
    pub adv: f64,
    pub rec: f64,
    pub perc: f64,
    pub smooth: f64,
    pub dist: f64,
}

pub const TERM_NAMES: [&str; 6] = ["l_d", "l_g", "l_rec", "l_perc", "l_smooth", "l_dist"];

/// Weighted terms of `½L_D + L_G + λ_rec L_rec + L_perc + λ_smooth L_smooth
/// + λ_dist L_dist` in [`TERM_NAMES`] order, and their sum.
pub fn total_loss(c: &Components, w: &LossWeights) -> ([f64; 6], f64) {
    let perc = if w.perceptual { c.perc } else { 0.0 };
    let terms = [0.5 * c.d, w.adv * c.adv, w.rec * c.rec, perc, w.smooth * c.smooth, w.dist * c.dist];
    let total = terms.iter().sum();
    (terms, total)
}
