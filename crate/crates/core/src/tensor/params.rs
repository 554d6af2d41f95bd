use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CheckpointEntry, Graph, Tensor, Var};
use crate::error::{bail, Result};
use crate::Real;

/// The four parameter families of the model. Generator groups are updated
/// by the generator optimizer, the discriminator group by its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// `w_E`: shared 2D feature encoder.
    Encoder,
    /// `w_V`: 3D UNet that turns the cost volume into the embedding volume.
    Volume,
    /// `w_Θ`: radiance MLP.
    Field,
    /// `w_Φ`: PatchGAN discriminator.
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Volume, Group::Field, Group::Discriminator];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "w_E",
            Group::Volume => "w_V",
            Group::Field => "w_Theta",
            Group::Discriminator => "w_Phi",
        }
    }

    pub fn is_generator(self) -> bool {
        self != Group::Discriminator
    }

    fn from_prefix(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.prefix() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    group: Group,
    value: Tensor<T>,
}

/// Named learnable tensors plus non-learnable buffers (running statistics).
///
/// Parameters are initialized from a ChaCha stream seeded once, in
/// registration order, so a given architecture and seed always produce the
/// same weights.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// Graph handles for every parameter of a [`ParamSet`], created by
/// [`ParamSet::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn full_name(group: Group, name: &str) -> String {
        format!("{}.{name}", group.prefix())
    }

    fn name_taken(&self, full: &str) -> bool {
        self.params.iter().any(|p| p.name == full) || self.buffers.iter().any(|(n, _)| n == full)
    }

    pub fn register(&mut self, group: Group, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = Self::full_name(group, name);
        if self.name_taken(&full) {
            bail!(Contract, "duplicate parameter name {full}");
        }
        self.params.push(Param { name: full, group, value });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Kaiming-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, group: Group, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = num_traits::Float::sqrt(6.0 / fan_in as f64);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.register(group, name, t)
    }

    pub fn zeros(&mut self, group: Group, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(group, name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, group: Group, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(group, name, Tensor::full(shape, T::one()))
    }

    pub fn buffer(&mut self, group: Group, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let full = Self::full_name(group, name);
        if self.name_taken(&full) {
            bail!(Contract, "duplicate buffer name {full}");
        }
        self.buffers.push((full, value));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    /// Replaces a parameter's values; the shape is fixed at registration.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            bail!(Dimension, "{} has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape());
        }
        p.value = value;
        Ok(())
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        self.params[id.0].value.data_mut()
    }

    pub fn buffer_value(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.params[id.0].group == group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count_values(&self, group: Group) -> usize {
        self.ids_in(group).map(|id| self.get(id).numel()).sum()
    }

    /// Places every parameter on `graph`; those whose group satisfies
    /// `trainable` become gradient leaves, the rest constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable(p.group) { graph.leaf(p.value.clone()) } else { graph.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Exponential moving average update of running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_buffers(&mut self, updates: &[(BufferId, Vec<T>)], momentum: T) {
        for (id, batch) in updates {
            let buf = self.buffers[id.0].1.data_mut();
            for (r, &b) in buf.iter_mut().zip(batch) {
                *r = momentum * *r + (T::one() - momentum) * b;
            }
        }
    }

    /// Parameters and buffers as checkpoint records.
    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.params
            .iter()
            .map(|p| (&p.name, &p.value))
            .chain(self.buffers.iter().map(|(n, v)| (n, v)))
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f32()).collect(),
            })
            .collect()
    }

    /// Overwrites parameters and buffers from checkpoint records. Every
    /// registered name must be present with its registered shape; entries
    /// with unknown names are ignored.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let convert = |name: &str, current: &Tensor<T>| -> Result<Tensor<T>> {
            let Some(e) = find(name) else {
                bail!(Format, "checkpoint has no entry {name}");
            };
            if e.shape != current.shape() {
                bail!(Format, "{name}: checkpoint shape {:?}, model shape {:?}", e.shape, current.shape());
            }
            Tensor::new(e.shape.clone(), e.values.iter().map(|&v| T::of(v as f64)).collect())
        };
        for p in &mut self.params {
            p.value = convert(&p.name, &p.value)?;
        }
        for (name, value) in &mut self.buffers {
            *value = convert(name, value)?;
        }
        Ok(())
    }
}

/// Splits `w_E.conv0.weight` into its group and local name.
pub fn split_name(full: &str) -> Option<(Group, &str)> {
    let (prefix, rest) = full.split_once('.')?;
    Some((Group::from_prefix(prefix)?, rest))
}
