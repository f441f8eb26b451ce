//! One-step enhancement from pure noise at the top of the schedule.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::retinex::{reconstruct, ImageRGB, RetinexPair};
use crate::sampling::SeededRng;
use crate::tensor::Tensor;
use crate::train::ModelPair;

#[derive(Clone, Debug)]
pub struct EnhanceResult {
    pub enhanced: ImageRGB,
    /// Clamped to `[0, 1]`, shape `[3, H, W]`.
    pub reflectance_hat: Tensor,
    /// Clamped to `[0, 1]`, shape `[1, H, W]`.
    pub illumination_hat: Tensor,
    pub wall_time_seconds: f64,
}

/// Evaluates each component model exactly once at `sigma_max` on
/// `sigma_max * noise` conditioned on `low`, clamps both predictions and
/// multiplies them.
pub fn one_step_enhance(
    models: &ModelPair,
    low: &ImageRGB,
    rng: &mut SeededRng,
    use_ema: bool,
) -> Result<EnhanceResult> {
    let start = Instant::now();
    let (h, w) = (low.height(), low.width());
    for m in [&models.reflectance, &models.illumination] {
        let f = m.config().downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "enhance",
                format!(
                    "{h}x{w} input is not divisible by {f}; pad to {}x{}",
                    h.div_ceil(f) * f,
                    w.div_ceil(f) * f
                ),
            ));
        }
    }
    let condition = low.pixels().reshape(&[1, 3, h, w])?;
    let mut predict = |channels: usize, model: &crate::net::DenoiserModel| -> Result<Tensor> {
        let sigma = model.schedule().sigma_max();
        let noise = Tensor::new(rng.normal_vec(channels * h * w), &[1, channels, h, w])?;
        let out = model.forward(&noise.scale(sigma), sigma, &condition, use_ema)?;
        Ok(out.clamp(0.0, 1.0).reshape(&[channels, h, w])?.detach())
    };
    let reflectance_hat = predict(3, &models.reflectance)?;
    let illumination_hat = predict(1, &models.illumination)?;
    let enhanced = reconstruct(&RetinexPair::new(
        reflectance_hat.clone(),
        illumination_hat.clone(),
    )?)?;
    Ok(EnhanceResult {
        enhanced,
        reflectance_hat,
        illumination_hat,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}
