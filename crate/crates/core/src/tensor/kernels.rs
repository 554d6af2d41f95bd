//! Raw loops behind the differentiable convolution and sampling ops.
//!
//! Convolutions are always 3D here; 2D convolutions run with a unit depth
//! axis. Reduction order depends only on the output index, never on batch
//! composition.

use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if kernel > padded || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `o` with `o * s + k - p` inside `[0, len)`.
#[inline]
fn valid(len: usize, out: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let top = len + p;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - 1 - k) / s + 1).min(out);
    (lo.min(hi), hi)
}

/// Visits every (input row, output row, weight index) triple of the
/// convolution with the contiguous column range that overlaps.
#[inline]
fn for_each_row(
    d: &ConvDims,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    let [id_, ih_, iw_] = d.input;
    let [od_, oh_, ow_] = d.output;
    let [kd_, kh_, kw_] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    for n in 0..d.n {
        for co in 0..d.co {
            let out_base = (n * d.co + co) * d.out_vol();
            for ci in 0..d.ci {
                let in_base = (n * d.ci + ci) * d.in_vol();
                let k_base = (co * d.ci + ci) * d.k_vol();
                for kd in 0..kd_ {
                    let (od_lo, od_hi) = valid(id_, od_, sd, pd, kd);
                    for kh in 0..kh_ {
                        let (oh_lo, oh_hi) = valid(ih_, oh_, sh, ph, kh);
                        for kw in 0..kw_ {
                            let (ow_lo, ow_hi) = valid(iw_, ow_, sw, pw, kw);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let k_idx = k_base + (kd * kh_ + kh) * kw_ + kw;
                            for od in od_lo..od_hi {
                                let idd = od * sd + kd - pd;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * sh + kh - ph;
                                    let orow = out_base + (od * oh_ + oh) * ow_;
                                    let irow = in_base + (idd * ih_ + ih) * iw_;
                                    f(k_idx, orow, irow, ow_lo, ow_hi, kw, pw);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(d: &ConvDims, input: &[T], kernel: &[T], out: &mut [T]) {
    let sw = d.stride[2];
    for_each_row(d, |k_idx, orow, irow, lo, hi, kw, pw| {
        let w = kernel[k_idx];
        if sw == 1 {
            let i0 = irow + lo + kw - pw;
            let dst = &mut out[orow + lo..orow + hi];
            let src = &input[i0..i0 + (hi - lo)];
            for (o, &i) in dst.iter_mut().zip(src) {
                *o += w * i;
            }
        } else {
            for ow in lo..hi {
                out[orow + ow] += w * input[irow + ow * sw + kw - pw];
            }
        }
    });
}

pub(crate) fn conv_backward_input<T: Real>(d: &ConvDims, grad_out: &[T], kernel: &[T], grad_in: &mut [T]) {
    let sw = d.stride[2];
    for_each_row(d, |k_idx, orow, irow, lo, hi, kw, pw| {
        let w = kernel[k_idx];
        if sw == 1 {
            let i0 = irow + lo + kw - pw;
            let src = &grad_out[orow + lo..orow + hi];
            let dst = &mut grad_in[i0..i0 + (hi - lo)];
            for (gi, &g) in dst.iter_mut().zip(src) {
                *gi += w * g;
            }
        } else {
            for ow in lo..hi {
                grad_in[irow + ow * sw + kw - pw] += w * grad_out[orow + ow];
            }
        }
    });
}

pub(crate) fn conv_backward_kernel<T: Real>(d: &ConvDims, input: &[T], grad_out: &[T], grad_k: &mut [T]) {
    let sw = d.stride[2];
    for_each_row(d, |k_idx, orow, irow, lo, hi, kw, pw| {
        let mut acc = T::zero();
        if sw == 1 {
            let i0 = irow + lo + kw - pw;
            for (&g, &i) in grad_out[orow + lo..orow + hi].iter().zip(&input[i0..i0 + (hi - lo)]) {
                acc += g * i;
            }
        } else {
            for ow in lo..hi {
                acc += grad_out[orow + ow] * input[irow + ow * sw + kw - pw];
            }
        }
        grad_k[k_idx] += acc;
    });
}

/// Corner indices and weights of one interpolated sample along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lerp<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

/// Splits a continuous coordinate into neighbouring integer positions.
/// Returns `None` outside `[0, len - 1]` or for non-finite input.
#[inline]
pub(crate) fn lerp_axis<T: Real>(x: T, len: usize) -> Option<Lerp<T>> {
    let max = T::of((len - 1) as f64);
    if !x.is_finite() || x < T::zero() || x > max {
        return None;
    }
    if len == 1 {
        return Some(Lerp { i0: 0, i1: 0, frac: T::zero() });
    }
    let mut i0 = x.floor().as_f64() as usize;
    if i0 >= len - 1 {
        i0 = len - 2;
    }
    Some(Lerp { i0, i1: i0 + 1, frac: x - T::of(i0 as f64) })
}
