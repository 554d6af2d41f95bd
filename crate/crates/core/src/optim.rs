//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{CheckpointEntry, ParamId, ParamSet};
use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub ids: Vec<ParamId>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Optimizer over `ids` with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(params: &ParamSet<T>, ids: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<Vec<T>> = ids.iter().map(|&id| vec![T::zero(); params.get(id).numel()]).collect();
        let v = m.clone();
        Self { ids, m, v, step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update. `grads[i]` belongs to `ids[i]`; `None` counts as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<&[T]>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            bail!(Contract, "{} gradients for {} parameters", grads.len(), self.ids.len());
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.step as i32);
        let c2 = one - b2.powi(self.step as i32);
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (k, &id) in self.ids.iter().enumerate() {
            let p = params.values_mut(id);
            if let Some(g) = grads[k] {
                if g.len() != p.len() {
                    bail!(Dimension, "gradient of length {} for parameter of {}", g.len(), p.len());
                }
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = grads[k].map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments and step count as checkpoint records under `prefix`.
    pub fn to_entries(&self, params: &ParamSet<T>, prefix: &str) -> Vec<CheckpointEntry> {
        let mut out = vec![CheckpointEntry::scalar(&alloc::format!("{prefix}.step"), self.step as f32)];
        for (k, &id) in self.ids.iter().enumerate() {
            let shape = params.get(id).shape().to_vec();
            for (tag, values) in [("m", &self.m[k]), ("v", &self.v[k])] {
                out.push(CheckpointEntry {
                    name: alloc::format!("{prefix}.{tag}.{}", params.name(id)),
                    shape: shape.clone(),
                    values: values.iter().map(|x| x.as_f32()).collect(),
                });
            }
        }
        out
    }

    pub fn load_entries(&mut self, params: &ParamSet<T>, prefix: &str, entries: &[CheckpointEntry]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let Some(step) = find(&alloc::format!("{prefix}.step")) else {
            bail!(Format, "checkpoint has no {prefix}.step");
        };
        self.step = step.values[0] as u64;
        for (k, &id) in self.ids.iter().enumerate() {
            for (tag, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let name = alloc::format!("{prefix}.{tag}.{}", params.name(id));
                let Some(e) = find(&name) else {
                    bail!(Format, "checkpoint has no {name}");
                };
                if e.values.len() != slot.len() {
                    bail!(Format, "{name} has {} values, expected {}", e.values.len(), slot.len());
                }
                *slot = e.values.iter().map(|&x| T::of(x as f64)).collect();
            }
        }
        Ok(())
    }
}
