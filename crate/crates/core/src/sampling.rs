//! Seeded random streams and the noise-level samplers used in training.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Name of the generator behind [`SeededRng`], echoed into run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8";

/// ChaCha8 stream keyed by a 64-bit seed.
///
/// ChaCha is counter based and its output is defined independently of
/// platform, so a seed pins the whole draw sequence. Independent workers
/// get their own stream via [`SeededRng::fork`].
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh generator on stream `offset` of the same key.
    pub fn fork(&self, offset: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(offset);
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer on `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Parameters of the noise-emphasised sampler and the consistency gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Lower edge of the high-noise band as a fraction of `sigma_max`.
    pub tau: f64,
    /// Probability of drawing from the high-noise band.
    pub p_large: f64,
    /// Largest grid gap between the two consistency levels.
    pub k_max: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tau: 0.95,
            p_large: 0.95,
            k_max: 5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.p_large) {
            return Err(Error::InvalidArgument(format!(
                "p_large must lie in [0, 1], got {}",
                self.p_large
            )));
        }
        if self.k_max < 1 {
            return Err(Error::InvalidArgument("k_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// `exp(U)` with `U` uniform on `[ln lo, ln hi]`.
pub fn sample_log_uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> Result<f64> {
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "log-uniform needs 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((a + rng.uniform() * (b - a)).exp().clamp(lo, hi))
}

/// Mixture sampler: with probability `p_large` a log-uniform draw on
/// `[tau * sigma_max, sigma_max]`, otherwise on the full range.
pub fn sample_bimodal(
    rng: &mut SeededRng,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<f64> {
    config.validate()?;
    let hi = schedule.sigma_max();
    let lo = if rng.uniform() < config.p_large {
        config.tau * hi
    } else {
        schedule.sigma_min()
    };
    sample_log_uniform(rng, lo.max(schedule.sigma_min()), hi)
}

/// Draws grid levels `(n, n + k)` with `k` uniform on `1..=k_max` and `n`
/// uniform over the positions that keep both levels on the grid.
pub fn sample_index_pair(
    rng: &mut SeededRng,
    n_levels: usize,
    k_max: usize,
) -> Result<(usize, usize)> {
    if k_max < 1 || n_levels <= k_max {
        return Err(Error::InvalidArgument(format!(
            "need n_levels > k_max >= 1, got n_levels {n_levels}, k_max {k_max}"
        )));
    }
    let k = 1 + rng.below(k_max);
    let low = rng.below(n_levels - k);
    Ok((low, low + k))
}

/// Kolmogorov-Smirnov distance between `draws` and the log-uniform CDF on
/// `[lo, hi]`. Sorts `draws` in place.
pub fn ks_log_uniform(draws: &mut [f64], lo: f64, hi: f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let (a, span) = (lo.ln(), (hi / lo).ln());
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x.ln() - a) / span).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max((i as f64 + 1.0) / n - cdf)
        })
        .fold(0.0, f64::max)
}
