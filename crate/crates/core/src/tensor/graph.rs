use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, lerp_axis, ConvDims};
use super::{check_shape, Tensor};
use crate::error::{bail, Result};
use crate::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MaxScalar(Var, T),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    VarianceAxis { x: Var, axis: usize },
    L1(Var),
    L2Sq(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    PadEnd(Var),
    RepeatLast { x: Var, k: usize },
    ExclusiveCumsum(Var),
    MatMul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Conv { input: Var, kernel: Var, dims: ConvDims },
    ConvTranspose { input: Var, kernel: Var, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<T>, xhat: Vec<T>, train: bool },
    Bilinear { map: Var, coords: Var, mask: Vec<bool> },
    Trilinear { volume: Var, coords: Var, mask: Vec<bool> },
    MaskedVariance { inputs: Vec<Var>, masks: Vec<Vec<bool>> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, so
/// the node list is already a topological order and backward is a single
/// reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss
    /// and was marked as requiring gradients.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v).map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }

    /// Gradient of `v`, zero-filled when `v` did not reach the loss.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.tensor(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dim_err<V>(msg: alloc::string::String) -> Result<V> {
    Err(crate::Error::Dimension(msg))
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Allows another backward pass over the same tape.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let Tensor { shape, data } = t;
        self.nodes.push(Node { shape, value: data, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let Tensor { shape, data } = t;
        self.nodes.push(Node { shape, value: data, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone() }
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let shape = if sa == sb {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else if nb == 1 {
            sa.clone()
        } else {
            return dim_err(alloc::format!("incompatible operand shapes {sa:?} and {sb:?}"));
        };
        let n = shape.iter().product::<usize>();
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..n)
            .map(|i| f(va[if na == 1 { 0 } else { i }], vb[if nb == 1 { 0 } else { i }]))
            .collect();
        Ok(self.push(shape, value, op(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        self.push(shape, value, op, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `max(x, c)` elementwise; the gradient passes only where `x > c`.
    pub fn max_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::MaxScalar(x, c), |v| v.max(c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Sum of absolute values.
    pub fn l1(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().map(|v| v.abs()).sum();
        self.push(vec![1], vec![s], Op::L1(x), &[x])
    }

    /// Sum of squares.
    pub fn l2sq(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().map(|&v| v * v).sum();
        self.push(vec![1], vec![s], Op::L2Sq(x), &[x])
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = &self.nodes[x.0].shape;
        if axis >= shape.len() {
            bail!(Dimension, "axis {axis} out of range for {shape:?}");
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((outer, shape[axis], inner, out_shape))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis)?;
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &v[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(self.push(shape, out, Op::SumAxis { x, axis }, &[x]))
    }

    /// Population variance along `axis`.
    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis)?;
        let v = &self.nodes[x.0].value;
        let inv_n = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| v[(o * n + k) * inner + i];
                let mean = (0..n).map(at).sum::<T>() * inv_n;
                out[o * inner + i] = (0..n).map(|k| (at(k) - mean) * (at(k) - mean)).sum::<T>() * inv_n;
            }
        }
        Ok(self.push(shape, out, Op::VarianceAxis { x, axis }, &[x]))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.nodes[x.0].value.len() {
            bail!(Dimension, "cannot reshape {:?} into {shape:?}", self.nodes[x.0].shape);
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Transposes a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            bail!(Dimension, "transpose expects rank 2, got {shape:?}");
        }
        let (r, c) = (shape[0], shape[1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            bail!(Contract, "concat of an empty list");
        };
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            bail!(Dimension, "axis {axis} out of range for {base:?}");
        }
        let mut total = 0;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            let same_rest = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                bail!(Dimension, "concat along {axis}: {s:?} does not match {base:?}");
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.nodes[v.0].shape[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].value[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            bail!(Dimension, "slice {start}..{} of axis {axis} out of range for {shape:?}", start + len);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Zero-pads every axis at its end up to `shape`.
    pub fn pad_end(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.nodes[x.0].shape.clone();
        if shape.len() != src_shape.len() || shape.iter().zip(&src_shape).any(|(a, b)| a < b) {
            bail!(Dimension, "cannot pad {src_shape:?} to {shape:?}");
        }
        let n = check_shape(shape)?;
        let mut out = vec![T::zero(); n];
        let v = &self.nodes[x.0].value;
        for (i, &val) in v.iter().enumerate() {
            out[remap_index(i, &src_shape, shape)] = val;
        }
        Ok(self.push(shape.to_vec(), out, Op::PadEnd(x), &[x]))
    }

    /// Appends a trailing axis of length `k` by repetition.
    pub fn repeat_last(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 0 {
            bail!(Dimension, "repeat count must be positive");
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape.push(k);
        let out = self.nodes[x.0].value.iter().flat_map(|&v| core::iter::repeat(v).take(k)).collect();
        Ok(self.push(shape, out, Op::RepeatLast { x, k }, &[x]))
    }

    /// Exclusive prefix sum along the last axis: `y_j = sum_{i<j} x_i`.
    pub fn exclusive_cumsum(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().expect("rank >= 1");
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); v.len()];
        for (src, dst) in v.chunks(n).zip(out.chunks_mut(n)) {
            let mut acc = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = acc;
                acc += s;
            }
        }
        self.push(shape, out, Op::ExclusiveCumsum(x), &[x])
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul of {sa:?} and {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = va[i * k + p];
                if s == T::zero() {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                    *o += s * w;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias` (shape `[n]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.nodes[x.0].shape.last().expect("rank >= 1");
        if self.nodes[bias.0].value.len() != n {
            bail!(Dimension, "bias of {:?} for last axis {n}", self.nodes[bias.0].shape);
        }
        let b = &self.nodes[bias.0].value;
        let out = self.nodes[x.0].value.chunks(n).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds a per-channel bias to an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 || self.nodes[bias.0].value.len() != shape[1] {
            bail!(Dimension, "channel bias {:?} for {shape:?}", self.nodes[bias.0].shape);
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = &self.nodes[bias.0].value;
        let out = self.nodes[x.0].value.iter().enumerate().map(|(i, &v)| v + b[(i / inner) % c]).collect();
        Ok(self.push(shape, out, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    // ---- convolution -------------------------------------------------

    fn conv_dims(&self, input: Var, kernel: Var, spatial: usize, spec: [ConvSpec; 3]) -> Result<ConvDims> {
        let si = &self.nodes[input.0].shape;
        let sk = &self.nodes[kernel.0].shape;
        if si.len() != 2 + spatial || sk.len() != 2 + spatial {
            bail!(Dimension, "conv{spatial}d expects rank-{} input and kernel, got {si:?} and {sk:?}", 2 + spatial);
        }
        if si[1] != sk[1] {
            bail!(Dimension, "input has {} channels but kernel expects {}", si[1], sk[1]);
        }
        let pad3 = |s: &[usize]| -> [usize; 3] {
            let mut out = [1; 3];
            out[3 - spatial..].copy_from_slice(&s[2..]);
            out
        };
        let (input_dims, kernel_dims) = (pad3(si), pad3(sk));
        let mut output = [1; 3];
        for a in 0..3 {
            let s = spec[a];
            if s.stride == 0 {
                bail!(Contract, "stride must be at least 1");
            }
            output[a] = ConvDims::out_len(input_dims[a], kernel_dims[a], s.stride, s.pad).ok_or_else(|| {
                crate::Error::Dimension(alloc::format!("kernel {sk:?} larger than padded input {si:?}"))
            })?;
        }
        Ok(ConvDims {
            n: si[0],
            ci: si[1],
            co: sk[0],
            input: input_dims,
            kernel: kernel_dims,
            output,
            stride: [spec[0].stride, spec[1].stride, spec[2].stride],
            pad: [spec[0].pad, spec[1].pad, spec[2].pad],
        })
    }

    fn conv(&mut self, input: Var, kernel: Var, spatial: usize, spec: [ConvSpec; 3]) -> Result<Var> {
        let dims = self.conv_dims(input, kernel, spatial, spec)?;
        let mut out = vec![T::zero(); dims.n * dims.co * dims.output.iter().product::<usize>()];
        kernels::conv_forward(&dims, &self.nodes[input.0].value, &self.nodes[kernel.0].value, &mut out);
        let mut shape = vec![dims.n, dims.co];
        shape.extend_from_slice(&dims.output[3 - spatial..]);
        Ok(self.push(shape, out, Op::Conv { input, kernel, dims }, &[input, kernel]))
    }

    /// `input [N, C_in, H, W]`, `kernel [C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let s = ConvSpec::new(stride, pad);
        self.conv(input, kernel, 2, [ConvSpec::new(1, 0), s, s])
    }

    /// `input [N, C_in, D, H, W]`, `kernel [C_out, C_in, kD, kH, kW]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let s = ConvSpec::new(stride, pad);
        self.conv(input, kernel, 3, [s, s, s])
    }

    /// Transposed 3D convolution. `kernel [C_in, C_out, kD, kH, kW]`; each
    /// spatial output length is `(in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose3d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if si.len() != 5 || sk.len() != 5 || si[1] != sk[0] {
            bail!(Dimension, "conv_transpose3d of {si:?} with kernel {sk:?}");
        }
        if stride == 0 {
            bail!(Contract, "stride must be at least 1");
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let full = (si[2 + a] - 1) * stride + sk[2 + a];
            if full <= 2 * pad {
                bail!(Dimension, "transposed convolution output collapses for {si:?}");
            }
            output[a] = full - 2 * pad;
        }
        // Viewed as the adjoint of a convolution from the output grid back to the input grid.
        let dims = ConvDims {
            n: si[0],
            ci: sk[1],
            co: sk[0],
            input: output,
            kernel: [sk[2], sk[3], sk[4]],
            output: [si[2], si[3], si[4]],
            stride: [stride; 3],
            pad: [pad; 3],
        };
        let mut out = vec![T::zero(); dims.n * dims.ci * output.iter().product::<usize>()];
        kernels::conv_backward_input(&dims, &self.nodes[input.0].value, &self.nodes[kernel.0].value, &mut out);
        let shape = vec![si[0], sk[1], output[0], output[1], output[2]];
        Ok(self.push(shape, out, Op::ConvTranspose { input, kernel, dims }, &[input, kernel]))
    }

    // ---- normalization -----------------------------------------------

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() < 2 {
            bail!(Dimension, "batch norm expects [N, C, ...], got {s:?}");
        }
        let c = s[1];
        if self.nodes[gamma.0].value.len() != c || self.nodes[beta.0].value.len() != c {
            bail!(Dimension, "batch norm affine parameters must have {c} entries");
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    /// Training-mode batch normalization over every axis except 1. Returns
    /// the output with the batch mean and (biased) variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        let v = &self.nodes[x.0].value;
        let m = T::of((n * inner) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let it = || (0..n).flat_map(move |b| v[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().copied());
            let mu = it().sum::<T>() / m;
            mean[ch] = mu;
            var[ch] = it().map(|a| (a - mu) * (a - mu)).sum::<T>() / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(BN_EPS)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, inner);
        let shape = self.nodes[x.0].shape.clone();
        let y = self.push(shape, out, Op::BatchNorm { x, gamma, beta, inv_std, xhat, train: true }, &[x, gamma, beta]);
        Ok((y, mean, var))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (n, c, inner) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            bail!(Dimension, "running statistics must have {c} entries");
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(BN_EPS)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, n, c, inner);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::BatchNorm { x, gamma, beta, inv_std, xhat, train: false }, &[x, gamma, beta]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], n: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
        let v = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut out = vec![T::zero(); v.len()];
        let mut xhat = vec![T::zero(); v.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    let h = (v[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        (out, xhat)
    }

    // ---- sampling ----------------------------------------------------

    /// Bilinear lookup of `map [C, H, W]` at `coords [K, 2]` holding
    /// continuous `(x, y)` pixel positions (pixel centres at integers).
    /// Returns `[C, K]` and a per-sample validity mask; samples outside
    /// `[0, W-1] x [0, H-1]` read as zero.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<(Var, Vec<bool>)> {
        let sm = self.nodes[map.0].shape.clone();
        let sc = &self.nodes[coords.0].shape;
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            bail!(Dimension, "bilinear_sample of {sm:?} at {sc:?}");
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let k = sc[0];
        let (m, xy) = (&self.nodes[map.0].value, &self.nodes[coords.0].value);
        let mut out = vec![T::zero(); c * k];
        let mut mask = vec![false; k];
        for s in 0..k {
            let (Some(lx), Some(ly)) = (lerp_axis(xy[2 * s], w), lerp_axis(xy[2 * s + 1], h)) else {
                continue;
            };
            mask[s] = true;
            let (fx, fy) = (lx.frac, ly.frac);
            let (gx, gy) = (T::one() - fx, T::one() - fy);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| m[(ch * h + yy) * w + xx];
                out[ch * k + s] = gy * (gx * at(ly.i0, lx.i0) + fx * at(ly.i0, lx.i1))
                    + fy * (gx * at(ly.i1, lx.i0) + fx * at(ly.i1, lx.i1));
            }
        }
        let v = self.push(vec![c, k], out, Op::Bilinear { map, coords, mask: mask.clone() }, &[map, coords]);
        Ok((v, mask))
    }

    /// Trilinear lookup of `volume [C, D, H, W]` at `coords [K, 3]` holding
    /// `(x, y, z)` with `x` along W, `y` along H and `z` along D.
    pub fn trilinear_sample(&mut self, volume: Var, coords: Var) -> Result<(Var, Vec<bool>)> {
        let sv = self.nodes[volume.0].shape.clone();
        let sc = &self.nodes[coords.0].shape;
        if sv.len() != 4 || sc.len() != 2 || sc[1] != 3 {
            bail!(Dimension, "trilinear_sample of {sv:?} at {sc:?}");
        }
        let (c, d, h, w) = (sv[0], sv[1], sv[2], sv[3]);
        let k = sc[0];
        let (m, xyz) = (&self.nodes[volume.0].value, &self.nodes[coords.0].value);
        let mut out = vec![T::zero(); c * k];
        let mut mask = vec![false; k];
        for s in 0..k {
            let (Some(lx), Some(ly), Some(lz)) =
                (lerp_axis(xyz[3 * s], w), lerp_axis(xyz[3 * s + 1], h), lerp_axis(xyz[3 * s + 2], d))
            else {
                continue;
            };
            mask[s] = true;
            let corners = trilinear_corners(lx, ly, lz);
            for ch in 0..c {
                let mut acc = T::zero();
                for &(zz, yy, xx, wgt) in &corners {
                    acc += wgt * m[((ch * d + zz) * h + yy) * w + xx];
                }
                out[ch * k + s] = acc;
            }
        }
        let v = self.push(vec![c, k], out, Op::Trilinear { volume, coords, mask: mask.clone() }, &[volume, coords]);
        Ok((v, mask))
    }

    /// Per-element population variance across `inputs` (all `[C, ...]`),
    /// counting only views whose mask entry (over the trailing axes) is
    /// set. Cells with fewer than two valid views get variance zero, and an
    /// extra trailing channel flags them with one. Values are accumulated in
    /// sorted order, so the result does not depend on view order.
    pub fn masked_variance(&mut self, inputs: &[Var], masks: &[Vec<bool>]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            bail!(Contract, "variance over an empty list of volumes");
        };
        if masks.len() != inputs.len() {
            bail!(Contract, "{} masks for {} volumes", masks.len(), inputs.len());
        }
        let shape = self.nodes[first.0].shape.clone();
        if shape.len() < 2 {
            bail!(Dimension, "masked variance expects [C, ...], got {shape:?}");
        }
        let c = shape[0];
        let cells: usize = shape[1..].iter().product();
        for (&v, m) in inputs.iter().zip(masks) {
            if self.nodes[v.0].shape != shape || m.len() != cells {
                bail!(Dimension, "volume {:?} / mask {} do not match {shape:?}", self.nodes[v.0].shape, m.len());
            }
        }
        let mut out = vec![T::zero(); (c + 1) * cells];
        let mut vals: Vec<T> = Vec::with_capacity(inputs.len());
        for cell in 0..cells {
            let valid = masks.iter().filter(|m| m[cell]).count();
            if valid < 2 {
                out[c * cells + cell] = T::one();
                continue;
            }
            let inv_n = T::one() / T::of(valid as f64);
            for ch in 0..c {
                vals.clear();
                vals.extend(
                    inputs.iter().zip(masks).filter(|(_, m)| m[cell]).map(|(v, _)| self.nodes[v.0].value[ch * cells + cell]),
                );
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
                let mean = vals.iter().copied().sum::<T>() * inv_n;
                let mut dev: Vec<T> = vals.iter().map(|&x| (x - mean) * (x - mean)).collect();
                dev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
                out[ch * cells + cell] = dev.iter().copied().sum::<T>() * inv_n;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = c + 1;
        Ok(self.push(out_shape, out, Op::MaskedVariance { inputs: inputs.to_vec(), masks: masks.to_vec() }, inputs))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Fan-out gradients add up. A
    /// second call without [`Graph::reset`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            bail!(Contract, "backward already ran on this graph; call reset() first");
        }
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Contract, "loss must be scalar, got shape {:?}", self.nodes[loss.0].shape);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn unary_grad(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], f: impl Fn(T, T) -> T) {
        let Some(gx) = self.acc(grads, x) else { return };
        let xv = &self.nodes[x.0].value;
        for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
            *d += gi * f(xi, T::zero());
        }
    }

    fn binary_grad(&self, grads: &mut [Option<Vec<T>>], a: Var, b: Var, g: &[T], da: impl Fn(T, T) -> T, db: impl Fn(T, T) -> T) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, nb) = (va.len(), vb.len());
        let at = |v: &[T], n: usize, i: usize| v[if n == 1 { 0 } else { i }];
        if let Some(ga) = self.acc(grads, a) {
            for (i, &gi) in g.iter().enumerate() {
                ga[if na == 1 { 0 } else { i }] += gi * da(at(va, na, i), at(vb, nb, i));
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for (i, &gi) in g.iter().enumerate() {
                gb[if nb == 1 { 0 } else { i }] += gi * db(at(va, na, i), at(vb, nb, i));
            }
        }
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let one = T::one();
        let zero = T::zero();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => self.binary_grad(grads, a, b, g, |_, _| one, |_, _| one),
            &Op::Sub(a, b) => self.binary_grad(grads, a, b, g, |_, _| one, |_, _| -one),
            &Op::Mul(a, b) => self.binary_grad(grads, a, b, g, |_, y| y, |x, _| x),
            &Op::Div(a, b) => self.binary_grad(grads, a, b, g, |_, y| one / y, |x, y| -x / (y * y)),
            &Op::Neg(x) => self.unary_grad(grads, x, g, |_, _| -one),
            &Op::Scale(x, c) => self.unary_grad(grads, x, g, |_, _| c),
            &Op::AddScalar(x) | &Op::Reshape(x) => self.unary_grad(grads, x, g, |_, _| one),
            &Op::MaxScalar(x, c) => self.unary_grad(grads, x, g, |v, _| if v > c { one } else { zero }),
            &Op::Exp(x) => self.unary_grad(grads, x, g, |v, _| v.exp()),
            &Op::Log(x) => self.unary_grad(grads, x, g, |v, _| one / v),
            &Op::Relu(x) => self.unary_grad(grads, x, g, |v, _| if v > zero { one } else { zero }),
            &Op::LeakyRelu(x, s) => self.unary_grad(grads, x, g, |v, _| if v > zero { one } else { s }),
            &Op::Softplus(x) => self.unary_grad(grads, x, g, |v, _| sigmoid(v)),
            &Op::Sigmoid(x) => {
                let Some(gx) = self.acc(grads, x) else { return };
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *d += gi * y * (one - y);
                }
            }
            &Op::Abs(x) => self.unary_grad(grads, x, g, |v, _| v.signum() * if v == zero { zero } else { one }),
            &Op::Square(x) => self.unary_grad(grads, x, g, |v, _| v + v),
            &Op::Sqrt(x) => {
                let Some(gx) = self.acc(grads, x) else { return };
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *d += gi / (y + y);
                }
            }
            &Op::Sum(x) => {
                let Some(gx) = self.acc(grads, x) else { return };
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean(x) => {
                let Some(gx) = self.acc(grads, x) else { return };
                let s = g[0] / T::of(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
            &Op::L1(x) => {
                let xv = &self.nodes[x.0].value;
                let Some(gx) = self.acc(grads, x) else { return };
                for (d, &v) in gx.iter_mut().zip(xv) {
                    if v != zero {
                        *d += g[0] * v.signum();
                    }
                }
            }
            &Op::L2Sq(x) => self.unary_grad(grads, x, &vec![g[0]; self.nodes[x.0].value.len()], |v, _| v + v),
            &Op::SumAxis { x, axis } => {
                let s = &self.nodes[x.0].shape;
                let (n, inner) = (s[axis], s[axis + 1..].iter().product::<usize>());
                let Some(gx) = self.acc(grads, x) else { return };
                for (i, d) in gx.iter_mut().enumerate() {
                    let o = i / (n * inner);
                    *d += g[o * inner + i % inner];
                }
            }
            &Op::VarianceAxis { x, axis } => {
                let s = &self.nodes[x.0].shape;
                let (outer, n, inner) = (s[..axis].iter().product::<usize>(), s[axis], s[axis + 1..].iter().product::<usize>());
                let xv = &self.nodes[x.0].value;
                let Some(gx) = self.acc(grads, x) else { return };
                let inv_n = one / T::of(n as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let mean = (0..n).map(|k| xv[idx(k)]).sum::<T>() * inv_n;
                        let go = g[o * inner + i];
                        for k in 0..n {
                            gx[idx(k)] += go * T::of(2.0) * (xv[idx(k)] - mean) * inv_n;
                        }
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let Some(gx) = self.acc(grads, x) else { return };
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let outer: usize = node.shape[..axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].shape[axis] * inner;
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            for (d, &s) in gv[o * n..(o + 1) * n].iter_mut().zip(&g[o * total + offset..o * total + offset + n]) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            &Op::Slice { x, axis, start } => {
                let s = &self.nodes[x.0].shape;
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let (n, len) = (s[axis], node.shape[axis]);
                let Some(gx) = self.acc(grads, x) else { return };
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
            &Op::PadEnd(x) => {
                let src_shape = self.nodes[x.0].shape.clone();
                let Some(gx) = self.acc(grads, x) else { return };
                for (i, d) in gx.iter_mut().enumerate() {
                    *d += g[remap_index(i, &src_shape, &node.shape)];
                }
            }
            &Op::RepeatLast { x, k } => {
                let Some(gx) = self.acc(grads, x) else { return };
                for (d, chunk) in gx.iter_mut().zip(g.chunks(k)) {
                    *d += chunk.iter().copied().sum::<T>();
                }
            }
            &Op::ExclusiveCumsum(x) => {
                let n = *node.shape.last().expect("rank >= 1");
                let Some(gx) = self.acc(grads, x) else { return };
                for (dst, src) in gx.chunks_mut(n).zip(g.chunks(n)) {
                    let mut acc = zero;
                    for j in (0..n).rev() {
                        dst[j] += acc;
                        acc += src[j];
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = va[i * k + p];
                            if s == zero {
                                continue;
                            }
                            for (d, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += s * x;
                            }
                        }
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::AddChannelBias { x, bias } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                let c = node.shape[1];
                let inner: usize = node.shape[2..].iter().product();
                if let Some(gb) = self.acc(grads, bias) {
                    for (i, &s) in g.iter().enumerate() {
                        gb[(i / inner) % c] += s;
                    }
                }
            }
            &Op::Conv { input, kernel, dims } => {
                if let Some(gi) = self.acc(grads, input) {
                    kernels::conv_backward_input(&dims, g, &self.nodes[kernel.0].value, gi);
                }
                if let Some(gk) = self.acc(grads, kernel) {
                    kernels::conv_backward_kernel(&dims, &self.nodes[input.0].value, g, gk);
                }
            }
            &Op::ConvTranspose { input, kernel, dims } => {
                if let Some(gi) = self.acc(grads, input) {
                    kernels::conv_forward(&dims, g, &self.nodes[kernel.0].value, gi);
                }
                if let Some(gk) = self.acc(grads, kernel) {
                    kernels::conv_backward_kernel(&dims, g, &self.nodes[input.0].value, gk);
                }
            }
            Op::BatchNorm { x, gamma, beta, inv_std, xhat, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let s = &self.nodes[x.0].shape;
                let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let gv = &self.nodes[gamma.0].value;
                let idx = move |ch: usize| (0..n).flat_map(move |b| (b * c + ch) * inner..(b * c + ch + 1) * inner);
                let mut sum_g = vec![zero; c];
                let mut sum_gx = vec![zero; c];
                for ch in 0..c {
                    for i in idx(ch) {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
                if let Some(gx) = self.acc(grads, x) {
                    let m = T::of((n * inner) as f64);
                    for ch in 0..c {
                        let k = gv[ch] * inv_std[ch];
                        for i in idx(ch) {
                            gx[i] += if *train {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Bilinear { map, coords, mask } => {
                let (map, coords) = (*map, *coords);
                let sm = &self.nodes[map.0].shape;
                let (c, h, w) = (sm[0], sm[1], sm[2]);
                let k = mask.len();
                let xy = &self.nodes[coords.0].value;
                let mv = &self.nodes[map.0].value;
                let lerps = |s: usize| (lerp_axis(xy[2 * s], w).unwrap(), lerp_axis(xy[2 * s + 1], h).unwrap());
                if let Some(gm) = self.acc(grads, map) {
                    for s in (0..k).filter(|&s| mask[s]) {
                        let (lx, ly) = lerps(s);
                        let (fx, fy) = (lx.frac, ly.frac);
                        for ch in 0..c {
                            let go = g[ch * k + s];
                            let base = ch * h * w;
                            gm[base + ly.i0 * w + lx.i0] += go * (one - fy) * (one - fx);
                            gm[base + ly.i0 * w + lx.i1] += go * (one - fy) * fx;
                            gm[base + ly.i1 * w + lx.i0] += go * fy * (one - fx);
                            gm[base + ly.i1 * w + lx.i1] += go * fy * fx;
                        }
                    }
                }
                if let Some(gc) = self.acc(grads, coords) {
                    for s in (0..k).filter(|&s| mask[s]) {
                        let (lx, ly) = lerps(s);
                        let (fx, fy) = (lx.frac, ly.frac);
                        for ch in 0..c {
                            let go = g[ch * k + s];
                            let at = |yy: usize, xx: usize| mv[(ch * h + yy) * w + xx];
                            let (v00, v01, v10, v11) = (at(ly.i0, lx.i0), at(ly.i0, lx.i1), at(ly.i1, lx.i0), at(ly.i1, lx.i1));
                            if w > 1 {
                                gc[2 * s] += go * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                            }
                            if h > 1 {
                                gc[2 * s + 1] += go * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                        }
                    }
                }
            }
            Op::Trilinear { volume, coords, mask } => {
                let (volume, coords) = (*volume, *coords);
                let sv = &self.nodes[volume.0].shape;
                let (c, d, h, w) = (sv[0], sv[1], sv[2], sv[3]);
                let k = mask.len();
                let xyz = &self.nodes[coords.0].value;
                let vv = &self.nodes[volume.0].value;
                let lerps = |s: usize| {
                    (lerp_axis(xyz[3 * s], w).unwrap(), lerp_axis(xyz[3 * s + 1], h).unwrap(), lerp_axis(xyz[3 * s + 2], d).unwrap())
                };
                if let Some(gv) = self.acc(grads, volume) {
                    for s in (0..k).filter(|&s| mask[s]) {
                        let (lx, ly, lz) = lerps(s);
                        for &(zz, yy, xx, wgt) in &trilinear_corners(lx, ly, lz) {
                            for ch in 0..c {
                                gv[((ch * d + zz) * h + yy) * w + xx] += g[ch * k + s] * wgt;
                            }
                        }
                    }
                }
                if let Some(gc) = self.acc(grads, coords) {
                    for s in (0..k).filter(|&s| mask[s]) {
                        let (lx, ly, lz) = lerps(s);
                        let lens = [w, h, d];
                        for axis in 0..3 {
                            if lens[axis] == 1 {
                                continue;
                            }
                            for &(zz, yy, xx, wgt) in &trilinear_corner_derivs(lx, ly, lz, axis) {
                                for ch in 0..c {
                                    gc[3 * s + axis] += g[ch * k + s] * wgt * vv[((ch * d + zz) * h + yy) * w + xx];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedVariance { inputs, masks } => {
                let c = node.shape[0] - 1;
                let cells: usize = node.shape[1..].iter().product();
                let counts: Vec<usize> = (0..cells).map(|cell| masks.iter().filter(|m| m[cell]).count()).collect();
                let mut means = vec![zero; c * cells];
                for cell in (0..cells).filter(|&cell| counts[cell] >= 2) {
                    let inv_n = one / T::of(counts[cell] as f64);
                    for ch in 0..c {
                        means[ch * cells + cell] = inputs
                            .iter()
                            .zip(masks)
                            .filter(|(_, m)| m[cell])
                            .map(|(v, _)| self.nodes[v.0].value[ch * cells + cell])
                            .sum::<T>()
                            * inv_n;
                    }
                }
                for (&v, m) in inputs.iter().zip(masks) {
                    let vals = &self.nodes[v.0].value;
                    let Some(gv) = self.acc(grads, v) else { continue };
                    for cell in (0..cells).filter(|&cell| m[cell] && counts[cell] >= 2) {
                        let two_over_n = T::of(2.0) / T::of(counts[cell] as f64);
                        for ch in 0..c {
                            let i = ch * cells + cell;
                            gv[i] += g[i] * two_over_n * (vals[i] - means[i]);
                        }
                    }
                }
            }
        }
    }
}

/// Index of the element at flat position `i` of `src` inside the larger
/// `dst` layout (same rank, every axis at least as long).
fn remap_index(mut i: usize, src: &[usize], dst: &[usize]) -> usize {
    let mut out = 0;
    let mut stride = 1;
    for a in (0..src.len()).rev() {
        let coord = i % src[a];
        i /= src[a];
        out += coord * stride;
        stride *= dst[a];
    }
    out
}

fn trilinear_corners<T: Real>(lx: kernels::Lerp<T>, ly: kernels::Lerp<T>, lz: kernels::Lerp<T>) -> [(usize, usize, usize, T); 8] {
    let one = T::one();
    let wx = [(lx.i0, one - lx.frac), (lx.i1, lx.frac)];
    let wy = [(ly.i0, one - ly.frac), (ly.i1, ly.frac)];
    let wz = [(lz.i0, one - lz.frac), (lz.i1, lz.frac)];
    let mut out = [(0, 0, 0, T::zero()); 8];
    let mut k = 0;
    for &(zi, zw) in &wz {
        for &(yi, yw) in &wy {
            for &(xi, xw) in &wx {
                out[k] = (zi, yi, xi, zw * yw * xw);
                k += 1;
            }
        }
    }
    out
}

/// Corner weights differentiated along `axis` (0 = x, 1 = y, 2 = z).
fn trilinear_corner_derivs<T: Real>(
    lx: kernels::Lerp<T>,
    ly: kernels::Lerp<T>,
    lz: kernels::Lerp<T>,
    axis: usize,
) -> [(usize, usize, usize, T); 8] {
    let one = T::one();
    let pair = |l: kernels::Lerp<T>, deriv: bool| {
        if deriv {
            [(l.i0, -one), (l.i1, one)]
        } else {
            [(l.i0, one - l.frac), (l.i1, l.frac)]
        }
    };
    let (wx, wy, wz) = (pair(lx, axis == 0), pair(ly, axis == 1), pair(lz, axis == 2));
    let mut out = [(0, 0, 0, T::zero()); 8];
    let mut k = 0;
    for &(zi, zw) in &wz {
        for &(yi, yw) in &wy {
            for &(xi, xw) in &wx {
                out[k] = (zi, yi, xi, zw * yw * xw);
                k += 1;
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
