//! Full-reference quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};
use crate::retinex::ImageRGB;

/// PSNR reported when the images are (numerically) identical.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(op: &'static str, a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if a.pixels().shape() != b.pixels().shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.pixels().shape(), b.pixels().shape()),
        ));
    }
    Ok(())
}

pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_same("mse", a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn mae(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_same("mae", a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions, averaged over the three channels.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"),
        ));
    }
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let x = &a.data()[c * plane..(c + 1) * plane];
        let y = &b.data()[c * plane..(c + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&prod(x, x), h, w, &k);
        let syy = filter_valid(&prod(y, y), h, w, &k);
        let sxy = filter_valid(&prod(x, y), h, w, &k);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}
