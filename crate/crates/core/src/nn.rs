//! Layers built from graph primitives. A layer stores parameter handles only;
//! values live in the [`ParamSet`] and are placed on the graph by a
//! [`Forward`] context.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::{BufferId, Bound, Graph, Group, ParamId, ParamSet, Tensor, Var};
use crate::Real;

/// Running-statistics momentum: `running = 0.9 * running + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages collected for update.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass: graph, bound parameters, mode, and the batch
/// statistics gathered along the way.
pub struct Forward<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamSet<T>,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub stats: Vec<(BufferId, Vec<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamSet<T>, bound: &'a Bound, mode: Mode) -> Self {
        Self { g, params, bound, mode, stats: Vec::new() }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    spatial: usize,
}

impl Conv {
    fn build<T: Real>(
        ps: &mut ParamSet<T>,
        group: Group,
        name: &str,
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = kernel_shape[1..].iter().product();
        let weight = ps.kaiming(group, &format!("{name}.weight"), kernel_shape, fan_in)?;
        let bias = if bias { Some(ps.zeros(group, &format!("{name}.bias"), &kernel_shape[..1])?) } else { None };
        Ok(Self { weight, bias, stride, pad, spatial: kernel_shape.len() - 2 })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new2d<T: Real>(
        ps: &mut ParamSet<T>,
        group: Group,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build(ps, group, name, &[co, ci, k, k], stride, pad, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new3d<T: Real>(
        ps: &mut ParamSet<T>,
        group: Group,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build(ps, group, name, &[co, ci, k, k, k], stride, pad, bias)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let y = if self.spatial == 2 {
            f.g.conv2d(x, w, self.stride, self.pad)?
        } else {
            f.g.conv3d(x, w, self.stride, self.pad)?
        };
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Transposed 3D convolution; kernel stored as `[C_in, C_out, k, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        group: Group,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        // each output cell receives about ci * (k / stride)^3 contributions
        let fan_in = (ci * k * k * k / (stride * stride * stride)).max(1);
        let weight = ps.kaiming(group, &format!("{name}.weight"), &[ci, co, k, k, k], fan_in)?;
        let bias = if bias { Some(ps.zeros(group, &format!("{name}.bias"), &[co])?) } else { None };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let y = f.g.conv_transpose3d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, group: Group, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.ones(group, &format!("{name}.gamma"), &[channels])?,
            beta: ps.zeros(group, &format!("{name}.beta"), &[channels])?,
            running_mean: ps.buffer(group, &format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: ps.buffer(group, &format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        match f.mode {
            Mode::Train => {
                let (y, mean, var) = f.g.batch_norm_train(x, gamma, beta)?;
                f.stats.push((self.running_mean, mean));
                f.stats.push((self.running_var, var));
                Ok(y)
            }
            Mode::Eval => {
                let mean = f.params.buffer_value(self.running_mean).data().to_vec();
                let var = f.params.buffer_value(self.running_var).data().to_vec();
                f.g.batch_norm_eval(x, gamma, beta, &mean, &var)
            }
        }
    }
}

/// `y = x W + b` with `W` of shape `[in, out]`, applied to `[rows, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, group: Group, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.kaiming(group, &format!("{name}.weight"), &[input, output], input)?,
            bias: ps.zeros(group, &format!("{name}.bias"), &[output])?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.weight), f.p(self.bias));
        let y = f.g.matmul(x, w)?;
        f.g.add_bias(y, b)
    }
}
