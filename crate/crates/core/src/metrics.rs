//! Image quality metrics.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{bail, Result};
use crate::image::Image;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        bail!(Dimension, "images are {}x{} and {}x{}", a.width, a.height, b.width, b.height);
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * Float::log10(m) })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| Float::exp(-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for &gy in &g {
        for &gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

/// Mean SSIM over all window positions fully inside the image, on the
/// channel-mean gray image, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        bail!(Domain, "SSIM needs at least {0}x{0} pixels, got {w}x{h}", SSIM_WINDOW);
    }
    let gray = |img: &Image| -> Vec<f64> { img.data.chunks(3).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / 3.0).collect() };
    let (ga, gb) = (gray(a), gray(b));
    let kernel = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let k = kernel[j * SSIM_WINDOW + i];
                    let idx = (y0 + j) * w + x0 + i;
                    let (x, y) = (ga[idx], gb[idx]);
                    ma += k * x;
                    mb += k * y;
                    aa += k * x * x;
                    bb += k * y * y;
                    ab += k * x * y;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean and median of the finite values, `None` if there are none.
pub fn mean_median(values: &[f64]) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some((mean, median))
}
