//! Conditional denoiser: a small U-Net with time-conditioned group norm,
//! wrapped in the skip/output preconditioning of the noise schedule.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::sampling::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{
    channel_affine, concat_channels, conv2d, group_norm, linear, upsample_nearest2x,
    ParameterStore, Tensor,
};

const GN_EPS: f64 = 1e-5;
/// Frequency range of the sinusoidal embedding of `ln sigma`.
const MIN_FREQ: f64 = 1.0 / 32.0;
const MAX_FREQ: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub fourier_bands: usize,
    pub groups: usize,
}

impl DenoiserConfig {
    /// Predicts the 3-channel reflectance.
    pub fn reflectance() -> Self {
        Self::with_outputs(3)
    }

    /// Predicts the 1-channel illumination.
    pub fn illumination() -> Self {
        Self::with_outputs(1)
    }

    fn with_outputs(out_channels: usize) -> Self {
        DenoiserConfig {
            in_channels: out_channels + 3,
            out_channels,
            base_width: 16,
            channel_multipliers: vec![1, 2, 4],
            fourier_bands: 64,
            groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.out_channels == 0 || self.in_channels != self.out_channels + 3 {
            return bad(format!(
                "in_channels must be out_channels + 3, got {} and {}",
                self.in_channels, self.out_channels
            ));
        }
        if self.groups == 0 || self.base_width == 0 || self.base_width % self.groups != 0 {
            return bad(format!(
                "base_width {} must be a positive multiple of groups {}",
                self.base_width, self.groups
            ));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.fourier_bands == 0 {
            return bad("fourier_bands must be at least 1".into());
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }

    /// Spatial sizes must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }

    fn embed_width(&self) -> usize {
        4 * self.base_width
    }
}

/// `[sin(2 pi f_j ln sigma), cos(2 pi f_j ln sigma)]` for `bands`
/// frequencies spaced geometrically between 1/32 and 2.
pub fn fourier_time_embedding(sigma: f64, bands: usize) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "time embedding needs sigma > 0, got {sigma}"
        )));
    }
    if bands == 0 {
        return Err(Error::InvalidArgument("need at least one band".into()));
    }
    let t = sigma.ln();
    let freqs: Vec<f64> = (0..bands)
        .map(|j| {
            let a = if bands == 1 {
                0.0
            } else {
                j as f64 / (bands - 1) as f64
            };
            MIN_FREQ * (MAX_FREQ / MIN_FREQ).powf(a)
        })
        .collect();
    let phase = |f: f64| std::f64::consts::TAU * f * t;
    let mut data: Vec<f64> = freqs.iter().map(|&f| phase(f).sin()).collect();
    data.extend(freqs.iter().map(|&f| phase(f).cos()));
    Tensor::new(data, &[2 * bands])
}

/// Group norm followed by the per-channel modulation `(1 + gamma)`, `beta`.
pub fn adagn(h: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    channel_affine(&group_norm(h, groups, GN_EPS)?, gamma, beta)
}

/// Which weights a forward pass reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    /// Live parameters, recorded for backpropagation.
    Live,
    /// Live parameter values without recording a graph.
    LiveDetached,
    /// The moving average, never recorded.
    Ema,
}

/// Parameters `theta`, their moving average `theta_minus`, and the
/// schedule the wrapper uses.
#[derive(Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    pub params: ParameterStore,
    pub ema_params: ParameterStore,
    evaluations: AtomicUsize,
}

impl Clone for DenoiserModel {
    fn clone(&self) -> Self {
        DenoiserModel {
            config: self.config.clone(),
            schedule: self.schedule,
            params: self.params.copy_with_grad(true),
            ema_params: self.ema_params.copy_with_grad(false),
            evaluations: AtomicUsize::new(self.evaluations()),
        }
    }
}

struct Block {
    name: String,
    c_in: usize,
    c_out: usize,
}

fn blocks(config: &DenoiserConfig) -> Vec<Block> {
    let w = config.widths();
    let last = w.len() - 1;
    let mut out = vec![Block {
        name: "enc0".into(),
        c_in: config.in_channels,
        c_out: w[0],
    }];
    for l in 1..=last {
        out.push(Block {
            name: format!("enc{l}"),
            c_in: w[l - 1],
            c_out: w[l],
        });
    }
    out.push(Block {
        name: "mid".into(),
        c_in: w[last],
        c_out: w[last],
    });
    for l in (0..last).rev() {
        out.push(Block {
            name: format!("dec{l}"),
            c_in: w[l + 1],
            c_out: w[l],
        });
    }
    out
}

impl DenoiserModel {
    /// Fresh model: He-scaled convolutions, zero modulation projections and
    /// a zero output layer, with the average initialised to an exact copy.
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let normal = |shape: &[usize], std: f64, rng: &mut SeededRng| {
            let n = shape.iter().product();
            Tensor::parameter(rng.normal_vec(n).into_iter().map(|v| v * std).collect(), shape)
        };
        let zeros = |shape: &[usize]| Tensor::parameter(vec![0.0; shape.iter().product()], shape);

        let (feat, emb) = (2 * config.fourier_bands, config.embed_width());
        params.insert("time.fc1.weight", normal(&[emb, feat], (1.0 / feat as f64).sqrt(), rng)?)?;
        params.insert("time.fc1.bias", zeros(&[emb])?)?;
        params.insert("time.fc2.weight", normal(&[emb, emb], (1.0 / emb as f64).sqrt(), rng)?)?;
        params.insert("time.fc2.bias", zeros(&[emb])?)?;
        for b in blocks(&config) {
            let fan_in = (b.c_in * 9) as f64;
            params.insert(
                format!("{}.conv.weight", b.name),
                normal(&[b.c_out, b.c_in, 3, 3], (2.0 / fan_in).sqrt(), rng)?,
            )?;
            params.insert(format!("{}.conv.bias", b.name), zeros(&[b.c_out])?)?;
            for proj in ["gamma", "beta"] {
                params.insert(format!("{}.{proj}.weight", b.name), zeros(&[b.c_out, emb])?)?;
                params.insert(format!("{}.{proj}.bias", b.name), zeros(&[b.c_out])?)?;
            }
        }
        let w0 = config.base_width * config.channel_multipliers[0];
        params.insert("out.conv.weight", zeros(&[config.out_channels, w0, 3, 3])?)?;
        params.insert("out.conv.bias", zeros(&[config.out_channels])?)?;

        let ema_params = params.copy_with_grad(false);
        Ok(DenoiserModel {
            config,
            schedule,
            params,
            ema_params,
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Number of forward evaluations since construction or the last reset.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Overwrites every parameter, including the zero-initialised ones, with
    /// Gaussian values of standard deviation `std / sqrt(fan_in)`, then
    /// copies them into the average.
    pub fn randomize(&mut self, rng: &mut SeededRng, std: f64) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let n: usize = shape.iter().product();
            let fan_in = if shape.len() > 1 { n / shape[0] } else { 1 };
            let s = std / (fan_in as f64).sqrt();
            self.params
                .set_data(&name, rng.normal_vec(n).into_iter().map(|v| v * s).collect())?;
        }
        self.sync_ema();
        Ok(())
    }

    /// Sets the average to an exact copy of the live parameters.
    pub fn sync_ema(&mut self) {
        self.ema_params = self.params.copy_with_grad(false);
    }

    fn check_inputs(&self, x: &Tensor, condition: &Tensor) -> Result<()> {
        let (xs, cs) = (x.shape(), condition.shape());
        if xs.len() != 4 || xs[1] != self.config.out_channels {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "noisy input must be [B, {}, H, W], got {xs:?}",
                    self.config.out_channels
                ),
            ));
        }
        if cs.len() != 4 || cs[1] != 3 || cs[0] != xs[0] || cs[2..] != xs[2..] {
            return Err(Error::shape(
                "denoiser",
                format!("condition {cs:?} does not match noisy input {xs:?}"),
            ));
        }
        let f = self.config.downsample_factor();
        if xs[2] % f != 0 || xs[3] % f != 0 {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "spatial size {}x{} is not divisible by {f}; pad to {}x{}",
                    xs[2],
                    xs[3],
                    xs[2].div_ceil(f) * f,
                    xs[3].div_ceil(f) * f
                ),
            ));
        }
        Ok(())
    }

    /// `c_skip(sigma) x + c_out(sigma) F([condition, c_in(sigma) x], sigma)`.
    ///
    /// With `use_ema` the average weights are used and the result is
    /// detached from any graph.
    pub fn forward(&self, x: &Tensor, sigma: f64, condition: &Tensor, use_ema: bool) -> Result<Tensor> {
        let weights = if use_ema { Weights::Ema } else { Weights::Live };
        self.forward_with(x, sigma, condition, weights)
    }

    pub fn forward_with(
        &self,
        x: &Tensor,
        sigma: f64,
        condition: &Tensor,
        weights: Weights,
    ) -> Result<Tensor> {
        let pre = self.schedule.precondition(sigma)?;
        self.check_inputs(x, condition)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let detached;
        let (x, condition, store) = match weights {
            Weights::Live => (x.clone(), condition.clone(), &self.params),
            Weights::LiveDetached => {
                detached = self.params.copy_with_grad(false);
                (x.detach(), condition.detach(), &detached)
            }
            Weights::Ema => (x.detach(), condition.detach(), &self.ema_params),
        };
        let input = concat_channels(&condition, &x.scale(pre.c_in))?;
        let f = self.raw(store, &input, sigma)?;
        x.scale(pre.c_skip).add(&f.scale(pre.c_out))
    }

    /// The bare network `F` evaluated with `store`.
    pub fn raw(&self, store: &ParameterStore, input: &Tensor, sigma: f64) -> Result<Tensor> {
        let p = |name: &str| store.get(name);
        let emb = fourier_time_embedding(sigma, self.config.fourier_bands)?;
        let emb = linear(&emb, p("time.fc1.weight")?, p("time.fc1.bias")?)?.silu();
        let emb = linear(&emb, p("time.fc2.weight")?, p("time.fc2.bias")?)?.silu();

        let block = |h: &Tensor, name: &str, stride: usize| -> Result<Tensor> {
            let h = conv2d(
                h,
                p(&format!("{name}.conv.weight"))?,
                p(&format!("{name}.conv.bias"))?,
                stride,
                1,
            )?;
            let gamma = linear(&emb, p(&format!("{name}.gamma.weight"))?, p(&format!("{name}.gamma.bias"))?)?;
            let beta = linear(&emb, p(&format!("{name}.beta.weight"))?, p(&format!("{name}.beta.bias"))?)?;
            Ok(adagn(&h, &gamma, &beta, self.config.groups)?.silu())
        };

        let levels = self.config.channel_multipliers.len();
        let mut h = block(input, "enc0", 1)?;
        let mut skips = vec![h.clone()];
        for l in 1..levels {
            h = block(&h, &format!("enc{l}"), 2)?;
            skips.push(h.clone());
        }
        h = block(&h, "mid", 1)?;
        for l in (0..levels - 1).rev() {
            h = upsample_nearest2x(&block(&h, &format!("dec{l}"), 1)?)?.add(&skips[l])?;
        }
        conv2d(&h, p("out.conv.weight")?, p("out.conv.bias")?, 1, 1)
    }

    /// Writes `params/<name>` and `ema/<name>` records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self
            .params
            .names()
            .map(|n| format!("params/{n}"))
            .chain(self.ema_params.names().map(|n| format!("ema/{n}")))
            .collect();
        let tensors = self.params.iter().chain(self.ema_params.iter()).map(|(_, t)| t);
        checkpoint::save(path, names.iter().map(String::as_str).zip(tensors))
    }

    /// Loads a checkpoint written by [`DenoiserModel::save`] for a model of
    /// the same configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut records = checkpoint::load(path)?;
        let expected = 2 * self.params.len();
        if records.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} holds {} records, model needs {expected}",
                path.display(),
                records.len()
            )));
        }
        for (prefix, store) in [("params", &mut self.params), ("ema", &mut self.ema_params)] {
            let names: Vec<String> = store.names().map(String::from).collect();
            for name in names {
                let key = format!("{prefix}/{name}");
                let t = records
                    .swap_remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing record {key}")))?;
                if t.shape() != store.get(&name)?.shape() {
                    return Err(Error::Checkpoint(format!(
                        "record {key} has shape {:?}, model expects {:?}",
                        t.shape(),
                        store.get(&name)?.shape()
                    )));
                }
                store.set_data(&name, t.to_vec())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: usize, base: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_width: base,
            fourier_bands: 8,
            ..DenoiserConfig::with_outputs(out)
        }
    }

    fn model(out: usize, seed: u64) -> DenoiserModel {
        DenoiserModel::new(small(out, 8), NoiseSchedule::default(), &mut SeededRng::new(seed)).unwrap()
    }

    fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        Tensor::new(rng.normal_vec(shape.iter().product()), shape).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::reflectance().validate().is_ok());
        assert!(DenoiserConfig::illumination().validate().is_ok());
        let base = DenoiserConfig::reflectance();
        assert!(DenoiserConfig { in_channels: 5, ..base.clone() }.validate().is_err());
        assert!(DenoiserConfig { base_width: 12, ..base.clone() }.validate().is_err());
        assert!(DenoiserConfig { channel_multipliers: vec![], ..base.clone() }.validate().is_err());
        assert!(DenoiserConfig { fourier_bands: 0, ..base.clone() }.validate().is_err());
        assert_eq!(base.downsample_factor(), 4);
    }

    #[test]
    fn embedding_contract() {
        for bands in [1, 7, 64] {
            assert_eq!(fourier_time_embedding(0.3, bands).unwrap().shape(), &[2 * bands]);
        }
        let a = fourier_time_embedding(1.7, 64).unwrap();
        assert_eq!(a.data(), fourier_time_embedding(1.7, 64).unwrap().data());
        assert!(fourier_time_embedding(0.0, 4).is_err());
        assert!(fourier_time_embedding(-1.0, 4).is_err());

        let lo = fourier_time_embedding(0.002, 64).unwrap();
        let hi = fourier_time_embedding(80.0, 64).unwrap();
        let dist = lo.sub(&hi).unwrap().square().sum().item().unwrap().sqrt();
        assert!(dist > 0.1 * 128f64.sqrt(), "{dist}");
    }

    #[test]
    fn adagn_modulation() {
        let mut rng = SeededRng::new(1);
        let h = random(&mut rng, &[2, 4, 3, 3]);
        let gn = group_norm(&h, 2, GN_EPS).unwrap();
        let z = Tensor::zeros(&[4]);
        assert_eq!(adagn(&h, &z, &z, 2).unwrap().data(), gn.data());
        let neg = Tensor::full(&[4], -1.0);
        assert!(adagn(&h, &neg, &z, 2).unwrap().data().iter().all(|&v| v == 0.0));
        let one = Tensor::full(&[4], 1.0);
        let shifted = adagn(&h, &z, &one, 2).unwrap();
        for (s, g) in shifted.data().iter().zip(gn.data()) {
            assert!((s - g - 1.0).abs() < 1e-15);
        }
        assert!(adagn(&h, &Tensor::zeros(&[3]), &z, 2).is_err());
    }

    #[test]
    fn boundary_is_exact_for_random_weights() {
        let mut rng = SeededRng::new(2);
        let mut m = model(3, 2);
        m.randomize(&mut rng, 1.0).unwrap();
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let c = random(&mut rng, &[2, 3, 8, 8]);
        for ema in [false, true] {
            let y = m.forward(&x, m.schedule().epsilon(), &c, ema).unwrap();
            assert_eq!(y.max_abs_diff(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn fresh_model_is_skip_path_only() {
        let mut rng = SeededRng::new(3);
        let m = model(1, 3);
        let x = random(&mut rng, &[1, 1, 8, 8]);
        let c = random(&mut rng, &[1, 3, 8, 8]);
        for sigma in [0.1, 5.0, 80.0] {
            let y = m.forward(&x, sigma, &c, false).unwrap();
            let expected = x.scale(m.schedule().precondition(sigma).unwrap().c_skip);
            assert!(y.max_abs_diff(&expected).unwrap() < 1e-15);
        }
    }

    #[test]
    fn output_decomposes_into_skip_and_network() {
        let mut rng = SeededRng::new(4);
        let mut m = model(3, 4);
        m.randomize(&mut rng, 1.0).unwrap();
        let x = random(&mut rng, &[1, 3, 8, 8]);
        let c = random(&mut rng, &[1, 3, 8, 8]);
        let pre = m.schedule().precondition(80.0).unwrap();
        let input = concat_channels(&c, &x.scale(pre.c_in)).unwrap();
        let f = m.raw(&m.params, &input, 80.0).unwrap();
        let y = m.forward(&x, 80.0, &c, false).unwrap();
        for ((yv, xv), fv) in y.data().iter().zip(x.data()).zip(f.data()) {
            assert!((yv - (pre.c_skip * xv + pre.c_out * fv)).abs() < 1e-12);
        }
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model(3, 5);
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let c = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(m.forward(&x, 100.0, &c, false), Err(Error::OutOfRange(_))));
        assert!(m.forward(&x, 1.0, &Tensor::zeros(&[1, 3, 4, 4]), false).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 1, 8, 8]), 1.0, &c, false).is_err());
        let odd = Tensor::zeros(&[1, 3, 6, 6]);
        let err = m.forward(&odd, 1.0, &odd, false).unwrap_err().to_string();
        assert!(err.contains("pad to 8x8"), "{err}");
    }

    #[test]
    fn ema_forward_is_detached_and_counted() {
        let mut rng = SeededRng::new(6);
        let mut m = model(3, 6);
        m.randomize(&mut rng, 1.0).unwrap();
        let x = random(&mut rng, &[1, 3, 8, 8]).with_requires_grad(true);
        let c = random(&mut rng, &[1, 3, 8, 8]);
        let before: Vec<Vec<f64>> = m.params.iter().map(|(_, t)| t.to_vec()).collect();
        m.reset_evaluations();
        let y = m.forward(&x, 3.0, &c, true).unwrap();
        assert!(!y.requires_grad() && !y.has_grad_fn());
        let live = m.forward(&x, 3.0, &c, false).unwrap();
        assert!(live.has_grad_fn());
        assert_eq!(y.data(), live.data());
        assert_eq!(m.evaluations(), 2);
        let after: Vec<Vec<f64>> = m.params.iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
        assert!(m.ema_params.iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn ema_starts_as_exact_copy() {
        let m = model(3, 7);
        assert!(m.params.same_layout(&m.ema_params));
        for ((_, a), (_, b)) in m.params.iter().zip(m.ema_params.iter()) {
            assert_eq!(a.data(), b.data());
            assert!(a.requires_grad() && !b.requires_grad());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = SeededRng::new(8);
        let mut a = model(3, 8);
        a.randomize(&mut rng, 1.0).unwrap();
        a.ema_params.set_data("out.conv.bias", vec![1.0, 2.0, 3.0]).unwrap();
        a.save(&path).unwrap();
        let mut b = model(3, 9);
        b.load(&path).unwrap();
        for (sa, sb) in [(&a.params, &b.params), (&a.ema_params, &b.ema_params)] {
            for ((na, ta), (nb, tb)) in sa.iter().zip(sb.iter()) {
                assert_eq!(na, nb);
                assert_eq!(ta.data(), tb.data());
            }
        }
        assert!(b.params.iter().all(|(_, t)| t.requires_grad()));
        let mut other = model(1, 9);
        assert!(matches!(other.load(&path), Err(Error::Checkpoint(_))));
    }
}
