//! Patch scale schedule, patch center sampling, PatchGAN discriminator and
//! least-squares adversarial losses.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{bail, Result};
use crate::nn::{BatchNorm, Conv, Forward};
use crate::tensor::{Graph, Group, ParamSet, Var};
use crate::Real;

/// Exponentially decaying patch scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSchedule {
    pub s_start: f64,
    pub s_end: f64,
    /// Per-iteration multiplicative factor.
    pub decay_rate: f64,
    pub delta: usize,
}

impl PatchSchedule {
    pub fn new(s_start: f64, s_end: f64, decay_rate: f64, delta: usize) -> Result<Self> {
        if !(s_start >= s_end && s_end > 0.0) || !(decay_rate > 0.0 && decay_rate <= 1.0) {
            bail!(Domain, "schedule needs s_start >= s_end > 0 and a decay rate in (0, 1]");
        }
        if delta == 0 || delta % 2 != 0 {
            bail!(Domain, "patch size must be positive and even, got {delta}");
        }
        Ok(Self { s_start, s_end, decay_rate, delta })
    }

    /// Decay chosen so the scale reaches `s_end` halfway through
    /// `iterations`.
    pub fn reaching_end_at_half(s_start: f64, s_end: f64, delta: usize, iterations: usize) -> Result<Self> {
        let half = (iterations / 2).max(1) as f64;
        Self::new(s_start, s_end, Float::powf(s_end / s_start, 1.0 / half), delta)
    }

    pub fn scale_at(&self, iteration: usize) -> f64 {
        let decayed = self.s_start * Float::powf(self.decay_rate, iteration as f64);
        decayed.max(self.s_end)
    }
}

/// Uniform patch center over the rectangle that keeps the whole grid on
/// pixel centers `0..=W-1`, `0..=H-1`: margin `m = s δ / 2`, so
/// `p ∈ [m, W-1-m] x [m, H-1-m]`.
pub fn sample_patch_center<R: Rng + ?Sized>(width: usize, height: usize, delta: usize, scale: f64, rng: &mut R) -> Result<(f64, f64)> {
    let extent = scale * delta as f64;
    let limit = (width.min(height) as f64) - 1.0;
    if !(extent <= limit) {
        bail!(Contract, "patch extent {extent} does not fit a {width}x{height} image");
    }
    let m = extent / 2.0;
    let x = m + rng.gen::<f64>() * ((width - 1) as f64 - extent);
    let y = m + rng.gen::<f64>() * ((height - 1) as f64 - extent);
    Ok((x, y))
}

/// Stride-2 4x4 convolutions with leaky ReLU; batch norm on every layer but
/// the first and the scoring layer. No terminal sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<(Conv, Option<BatchNorm>)>,
    pub input_side: usize,
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Side of the score map for an input of side `n` after `layers` k4 s2 p1
/// convolutions, or `None` if it collapses.
pub fn score_side(mut n: usize, layers: usize) -> Option<usize> {
    for _ in 0..layers {
        if n + 2 < 4 {
            return None;
        }
        n = (n + 2 - 4) / 2 + 1;
    }
    Some(n)
}

impl Discriminator {
    /// `channels` are the hidden widths; a final layer maps to one score
    /// channel. `delta` fixes the input side at `δ + 1`.
    pub fn new<T: Real>(ps: &mut ParamSet<T>, channels: &[usize], delta: usize) -> Result<Self> {
        let side = delta + 1;
        if score_side(side, channels.len() + 1).is_none_or(|s| s == 0) {
            bail!(Domain, "{} stride-2 layers collapse a {side}x{side} patch", channels.len() + 1);
        }
        let gd = Group::Discriminator;
        let mut layers = Vec::new();
        let mut ci = 3;
        for (i, &co) in channels.iter().chain(core::iter::once(&1)).enumerate() {
            let conv = Conv::new2d(ps, gd, &format!("conv{i}"), ci, co, 4, 2, 1, true)?;
            let hidden = i < channels.len();
            let bn = if i > 0 && hidden { Some(BatchNorm::new(ps, gd, &format!("bn{i}"), co)?) } else { None };
            layers.push((conv, bn));
            ci = co;
        }
        Ok(Self { layers, input_side: side })
    }

    /// Patches `[N, 3, δ+1, δ+1]` to score maps `[N, 1, h, w]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<T>, patches: Var) -> Result<Var> {
        let s = f.g.shape(patches);
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_side || s[3] != self.input_side {
            bail!(Contract, "discriminator expects [N, 3, {0}, {0}], got {s:?}", self.input_side);
        }
        let mut x = patches;
        let last = self.layers.len() - 1;
        for (i, (conv, bn)) in self.layers.iter().enumerate() {
            x = conv.forward(f, x)?;
            if let Some(bn) = bn {
                x = bn.forward(f, x)?;
            }
            if i < last {
                x = f.g.leaky_relu(x, T::of(LEAKY_SLOPE));
            }
        }
        Ok(x)
    }
}

/// `mean((1 - real)^2) + mean(fake^2)`.
pub fn loss_d<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    if g.shape(real) != g.shape(fake) {
        bail!(Dimension, "score maps {:?} and {:?} differ", g.shape(real), g.shape(fake));
    }
    let r = g.neg(real);
    let r = g.add_scalar(r, T::one());
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(fake);
    let f = g.mean(f);
    g.add(r, f)
}

/// Unweighted generator term `mean((1 - fake)^2)`.
pub fn adversarial_raw<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let x = g.neg(fake);
    let x = g.add_scalar(x, T::one());
    let x = g.square(x);
    g.mean(x)
}

/// `λ mean((1 - fake)^2)`.
pub fn loss_g_adv<T: Real>(g: &mut Graph<T>, fake: Var, lambda: T) -> Var {
    let raw = adversarial_raw(g, fake);
    g.scale(raw, lambda)
}
