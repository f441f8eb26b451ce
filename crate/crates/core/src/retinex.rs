//! Reflectance/illumination split, reconstruction and the synthetic pair
//! generator.

use crate::error::{Error, Result};
use crate::sampling::SeededRng;
use crate::tensor::Tensor;

/// Default guard added to the illumination estimate.
pub const DEFAULT_DELTA: f64 = 1e-4;

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageRGB {
    pixels: Tensor,
}

impl ImageRGB {
    /// Wraps a `[3, H, W]` tensor, rejecting values outside `[0, 1]`.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(
                "image",
                format!("expected [3, H, W], got {s:?}"),
            ));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageRGB {
            pixels: pixels.detach(),
        })
    }

    pub fn from_vec(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        ImageRGB::new(Tensor::new(data, &[3, height, width])?)
    }

    /// Clamps arbitrary values into range first.
    pub fn from_unclamped(pixels: &Tensor) -> Result<Self> {
        ImageRGB::new(pixels.clamp(0.0, 1.0))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        ImageRGB::new(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    /// `size x size` window with top-left corner at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        crop_chw(&self.pixels, top, left, size).and_then(ImageRGB::new)
    }

    pub fn flip_horizontal(&self) -> Self {
        ImageRGB {
            pixels: flip_chw(&self.pixels),
        }
    }
}

/// Copies a square spatial window out of a `[C, H, W]` tensor.
pub fn crop_chw(t: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("crop", format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::OutOfRange(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + left..row + left + size]);
        }
    }
    Tensor::new(out, &[c, size, size])
}

/// Mirrors a `[C, H, W]` tensor left to right.
pub fn flip_chw(t: &Tensor) -> Tensor {
    let w = t.shape()[t.shape().len() - 1];
    let data: Vec<f64> = t
        .data()
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(data, t.shape()).expect("flip keeps the element count")
}

/// `reflectance [3, H, W]` in `[0, 1]` and `illumination [1, H, W]` in
/// `(0, 1]`.
#[derive(Clone, Debug)]
pub struct RetinexPair {
    pub reflectance: Tensor,
    pub illumination: Tensor,
}

impl RetinexPair {
    pub fn new(reflectance: Tensor, illumination: Tensor) -> Result<Self> {
        let (r, l) = (reflectance.shape(), illumination.shape());
        if r.len() != 3 || r[0] != 3 || l.len() != 3 || l[0] != 1 || r[1..] != l[1..] {
            return Err(Error::shape(
                "retinex pair",
                format!("reflectance {r:?} and illumination {l:?} are incompatible"),
            ));
        }
        Ok(RetinexPair {
            reflectance,
            illumination,
        })
    }
}

/// `R_c * L` for every channel, clamped to `[0, 1]`.
pub fn reconstruct(pair: &RetinexPair) -> Result<ImageRGB> {
    let RetinexPair {
        reflectance,
        illumination,
    } = RetinexPair::new(pair.reflectance.clone(), pair.illumination.clone())?;
    let plane = illumination.numel();
    let l = illumination.data();
    let data = reflectance
        .data()
        .chunks_exact(plane)
        .flat_map(|ch| ch.iter().zip(l).map(|(r, l)| (r * l).clamp(0.0, 1.0)))
        .collect();
    ImageRGB::new(Tensor::new(data, reflectance.shape())?)
}

/// Max-channel estimate `L = min(max_c I_c + delta, 1)`, `R = clamp(I / L)`.
pub fn decompose_maxchannel(image: &ImageRGB, delta: f64) -> Result<RetinexPair> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let d = image.data();
    let illum: Vec<f64> = (0..plane)
        .map(|i| (d[i].max(d[plane + i]).max(d[2 * plane + i]) + delta).min(1.0))
        .collect();
    let refl: Vec<f64> = d
        .chunks_exact(plane)
        .flat_map(|ch| {
            ch.iter()
                .zip(&illum)
                .map(|(v, l)| (v / l).clamp(0.0, 1.0))
        })
        .collect();
    RetinexPair::new(Tensor::new(refl, &[3, h, w])?, Tensor::new(illum, &[1, h, w])?)
}

/// Low-light degradation `clamp(gain * I^gamma + N(0, noise_std^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub gamma: f64,
    pub gain: f64,
    pub noise_std: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation {
            gamma: 1.8,
            gain: 0.35,
            noise_std: 0.02,
        }
    }
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gain must lie in (0, 1], got {}",
                self.gain
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn apply(&self, image: &ImageRGB, rng: &mut SeededRng) -> Result<ImageRGB> {
        self.validate()?;
        let data = image
            .data()
            .iter()
            .map(|&v| {
                let mut out = self.gain * v.powf(self.gamma);
                if self.noise_std > 0.0 {
                    out += self.noise_std * rng.normal();
                }
                out.clamp(0.0, 1.0)
            })
            .collect();
        ImageRGB::from_vec(data, image.height(), image.width())
    }
}

/// Procedural texture: a per-channel linear gradient with a few flat
/// rectangles and a soft blob laid over it.
pub fn toy_texture(rng: &mut SeededRng, size: usize) -> Result<ImageRGB> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "toy images need size >= 8, got {size}"
        )));
    }
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    for ch in 0..3 {
        let base = 0.25 + 0.5 * rng.uniform();
        let slope = 0.5 * (rng.uniform() - 0.5);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * dx + y as f64 * dy) / size as f64;
                data[ch * plane + y * size + x] = base + slope * u;
            }
        }
    }
    let rects = 2 + rng.below(3);
    for _ in 0..rects {
        let rw = 2 + rng.below(size / 2);
        let rh = 2 + rng.below(size / 2);
        let x0 = rng.below(size - rw + 1);
        let y0 = rng.below(size - rh + 1);
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        for (ch, c) in color.iter().enumerate() {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    data[ch * plane + y * size + x] = 0.1 + 0.85 * c;
                }
            }
        }
    }
    let (cx, cy) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
    let radius = size as f64 * (0.15 + 0.2 * rng.uniform());
    let tint = [rng.uniform(), rng.uniform(), rng.uniform()];
    for (ch, t) in tint.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let r2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / radius.powi(2);
                let a = 0.6 * (-r2).exp();
                let v = &mut data[ch * plane + y * size + x];
                *v = (1.0 - a) * *v + a * t;
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    ImageRGB::from_vec(data, size, size)
}

/// A random texture and its degraded counterpart, `(low, normal)`.
pub fn make_toy_pair(
    rng: &mut SeededRng,
    size: usize,
    gamma: f64,
    gain: f64,
    noise_std: f64,
) -> Result<(ImageRGB, ImageRGB)> {
    let degradation = Degradation {
        gamma,
        gain,
        noise_std,
    };
    degradation.validate()?;
    let normal = toy_texture(rng, size)?;
    let low = degradation.apply(&normal, rng)?;
    Ok((low, normal))
}
