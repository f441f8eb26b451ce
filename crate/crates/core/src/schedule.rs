//! Noise-scale range, discretisation and preconditioning coefficients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Continuous noise range `[sigma_min, sigma_max]` together with its
/// discrete grid and the data scale used by the preconditioning.
///
/// The boundary time `epsilon` is always `sigma_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    sigma_data: f64,
    n_levels: usize,
    rho: f64,
}

/// Scalings applied around the raw network: the denoiser output is
/// `c_skip * x + c_out * F(c_in * x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            n_levels: 10,
            rho: 7.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(
        sigma_min: f64,
        sigma_max: f64,
        sigma_data: f64,
        n_levels: usize,
        rho: f64,
    ) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_data must be positive, got {sigma_data}"
            )));
        }
        if n_levels < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 noise levels, got {n_levels}"
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rho must be positive, got {rho}"
            )));
        }
        Ok(NoiseSchedule {
            sigma_min,
            sigma_max,
            sigma_data,
            n_levels,
            rho,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    /// Boundary time at which the denoiser is the identity.
    pub fn epsilon(&self) -> f64 {
        self.sigma_min
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `c_skip`, `c_out` and `c_in` at `sigma`, which must lie in
    /// `[epsilon, sigma_max]`.
    pub fn precondition(&self, sigma: f64) -> Result<Preconditioning> {
        self.check_range(sigma)?;
        let sd = self.sigma_data;
        let shifted = sigma - self.epsilon();
        Ok(Preconditioning {
            c_skip: sd * sd / (shifted * shifted + sd * sd),
            c_out: sd * shifted / (sd * sd + sigma * sigma).sqrt(),
            c_in: self.c_in(sigma),
        })
    }

    /// Input scaling `1 / sqrt(sigma^2 + sigma_data^2)`; defined for any
    /// `sigma >= 0`.
    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn check_range(&self, sigma: f64) -> Result<()> {
        if !(sigma >= self.epsilon() && sigma <= self.sigma_max) {
            return Err(Error::OutOfRange(format!(
                "sigma {sigma} outside [{}, {}]",
                self.epsilon(),
                self.sigma_max
            )));
        }
        Ok(())
    }

    /// The `n_levels` discrete noise levels, from `sigma_max` down to
    /// `sigma_min`, spaced uniformly in `sigma^(1/rho)`.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let inv = 1.0 / self.rho;
        let (hi, lo) = (self.sigma_max.powf(inv), self.sigma_min.powf(inv));
        let last = self.n_levels - 1;
        (0..self.n_levels)
            .map(|i| match i {
                0 => self.sigma_max,
                i if i == last => self.sigma_min,
                i => (hi + (i as f64 / last as f64) * (lo - hi)).powf(self.rho),
            })
            .collect()
    }

    /// Noise level `n` counted upwards from the least noisy grid point, so
    /// that `level_sigma(n + k) > level_sigma(n)` for `k > 0`.
    pub fn level_sigma(&self, n: usize) -> Result<f64> {
        if n >= self.n_levels {
            return Err(Error::OutOfRange(format!(
                "level {n} outside 0..{}",
                self.n_levels
            )));
        }
        Ok(self.sigma_grid()[self.n_levels - 1 - n])
    }

    /// Loss weight `r / (1 + r)` with `r = (sigma_data / sigma)^2`.
    pub fn snr_weight(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(Error::OutOfRange(format!(
                "snr weight needs sigma > 0, got {sigma}"
            )));
        }
        let r = (self.sigma_data / sigma).powi(2);
        Ok(r / (1.0 + r))
    }
}

/// Forward noising `x0 + sigma * noise`.
pub fn add_noise(x0: &Tensor, sigma: f64, noise: &Tensor) -> Result<Tensor> {
    x0.add(&noise.scale(sigma))
}

/// Converts a cumulative signal fraction `alpha_bar` in `(0, 1]` into the
/// equivalent variance-exploding noise level `sqrt((1 - a) / a)`.
pub fn sigma_from_alphabar(alphabar: f64) -> Result<f64> {
    if !(alphabar > 0.0 && alphabar <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "alpha_bar must lie in (0, 1], got {alphabar}"
        )));
    }
    Ok(((1.0 - alphabar) / alphabar).sqrt())
}
