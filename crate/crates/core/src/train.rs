//! Dual-objective training: the consistency term between adjacent grid
//! levels against the moving-average target, the direct regression term at
//! emphasised noise levels, AdamW and the averaging schedule.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{is_image_path, read_image};
use crate::net::{DenoiserModel, Weights};
use crate::retinex::{crop_chw, decompose_maxchannel, flip_chw, ImageRGB};
use crate::sampling::{sample_bimodal, sample_index_pair, SamplerConfig, SeededRng};
use crate::tensor::{ParameterStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_consist: f64,
    pub lambda_fixed: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub flip_prob: f64,
    /// Steps between checkpoints; the last step is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_consist: 1.0,
            lambda_fixed: 0.3,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            iterations: 2000,
            batch_size: 4,
            patch_size: 32,
            flip_prob: 0.5,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Loss weights may be zero (that switches a term off); rates must be
    /// positive.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [("lambda_consist", self.lambda_consist), ("lambda_fixed", self.lambda_fixed)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, patch_size and checkpoint_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        Ok(())
    }
}

/// `x_high + (sigma_low - sigma_high) (x_high - x0_target) / sigma_high`.
pub fn euler_step(x_high: &Tensor, sigma_high: f64, sigma_low: f64, x0_target: &Tensor) -> Result<Tensor> {
    if !(sigma_high > 0.0) {
        return Err(Error::OutOfRange(format!(
            "euler step needs sigma_high > 0, got {sigma_high}"
        )));
    }
    if sigma_low > sigma_high {
        return Err(Error::OutOfRange(format!(
            "euler step runs towards less noise, got {sigma_high} -> {sigma_low}"
        )));
    }
    let slope = x_high.sub(x0_target)?.scale(1.0 / sigma_high);
    x_high.add(&slope.scale(sigma_low - sigma_high))
}

/// Decay of the target average after `k` updates.
pub fn ema_mu(k: u64) -> f64 {
    ((1.0 + k as f64) / (10.0 + k as f64)).min(0.9999)
}

/// `theta_minus <- mu theta_minus + (1 - mu) theta` for every parameter.
pub fn ema_update(model: &mut DenoiserModel, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::OutOfRange(format!("ema decay must lie in [0, 1], got {mu}")));
    }
    let updates: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .zip(model.ema_params.iter())
        .map(|((name, cur), (_, old))| {
            let data = old
                .data()
                .iter()
                .zip(cur.data())
                .map(|(o, c)| mu * o + (1.0 - mu) * c)
                .collect();
            (name.to_string(), data)
        })
        .collect();
    for (name, data) in updates {
        model.ema_params.set_data(&name, data)?;
    }
    Ok(())
}

/// AdamW moments for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParameterStore, config: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update from the gradients accumulated on `params`; parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParameterStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!("optimizer tracks {} tensors, store has {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let updates: Vec<(String, Vec<f64>)> = params
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|((name, p), (m, v))| {
                let grad = p.grad();
                let data = p
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let g = grad.as_ref().map_or(0.0, |g| g[i]);
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                        let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                        w - self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w)
                    })
                    .collect();
                (name.to_string(), data)
            })
            .collect();
        for (name, data) in updates {
            params.set_data(&name, data)?;
        }
        Ok(())
    }
}

/// A training batch for one component: clean targets `x0 [B, C, H, W]`
/// and conditioning images `[B, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor,
    pub condition: Tensor,
}

impl Batch {
    fn check(&self) -> Result<()> {
        if self.x0.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(())
    }
}

fn weights_for(track: bool) -> Weights {
    if track {
        Weights::Live
    } else {
        Weights::LiveDetached
    }
}

/// Consistency term for a fixed level pair and noise draw:
/// `w(sigma_low) mean((f(x_low, sigma_low) - target)^2)` where `target` is
/// the averaged model at `x_high = x0 + sigma_high noise` and `x_low` is the
/// Euler step from `x_high` towards that target.
pub fn consistency_loss_at(
    model: &DenoiserModel,
    batch: &Batch,
    sigma_low: f64,
    sigma_high: f64,
    noise: &Tensor,
    track: bool,
) -> Result<Tensor> {
    batch.check()?;
    let x_high = batch.x0.add(&noise.scale(sigma_high))?;
    let target = model.forward(&x_high, sigma_high, &batch.condition, true)?;
    let x_low = euler_step(&x_high, sigma_high, sigma_low, &target)?;
    let pred = model.forward_with(&x_low, sigma_low, &batch.condition, weights_for(track))?;
    let w = model.schedule().snr_weight(sigma_low)?;
    Ok(pred.mse(&target)?.scale(w))
}

/// Draws a grid pair and noise, then evaluates [`consistency_loss_at`].
pub fn consistency_loss(
    model: &DenoiserModel,
    batch: &Batch,
    k_max: usize,
    rng: &mut SeededRng,
    track: bool,
) -> Result<Tensor> {
    let s = model.schedule();
    let (lo, hi) = sample_index_pair(rng, s.n_levels(), k_max)?;
    let (sigma_low, sigma_high) = (s.level_sigma(lo)?, s.level_sigma(hi)?);
    let noise = Tensor::new(rng.normal_vec(batch.x0.numel()), batch.x0.shape())?;
    consistency_loss_at(model, batch, sigma_low, sigma_high, &noise, track)
}

/// `mean((f(x0 + sigma noise, sigma) - x0)^2)`.
pub fn fixed_loss_at(
    model: &DenoiserModel,
    batch: &Batch,
    sigma: f64,
    noise: &Tensor,
    track: bool,
) -> Result<Tensor> {
    batch.check()?;
    let noisy = batch.x0.add(&noise.scale(sigma))?;
    let pred = model.forward_with(&noisy, sigma, &batch.condition, weights_for(track))?;
    pred.mse(&batch.x0)
}

/// Draws `sigma` from the mixture sampler and noise, then evaluates
/// [`fixed_loss_at`].
pub fn fixed_loss(
    model: &DenoiserModel,
    batch: &Batch,
    sampler: &SamplerConfig,
    rng: &mut SeededRng,
    track: bool,
) -> Result<Tensor> {
    let sigma = sample_bimodal(rng, model.schedule(), sampler)?;
    let noise = Tensor::new(rng.normal_vec(batch.x0.numel()), batch.x0.shape())?;
    fixed_loss_at(model, batch, sigma, &noise, track)
}

/// Paired low/normal images with the normal-light decomposition cached.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub names: Vec<String>,
    pub low: Vec<ImageRGB>,
    pub normal: Vec<ImageRGB>,
    reflectance: Vec<Tensor>,
    illumination: Vec<Tensor>,
}

impl PairedDataset {
    pub fn new(names: Vec<String>, low: Vec<ImageRGB>, normal: Vec<ImageRGB>, delta: f64) -> Result<Self> {
        if low.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if low.len() != normal.len() || names.len() != low.len() {
            return Err(Error::Data(format!(
                "{} names, {} low and {} normal images",
                names.len(),
                low.len(),
                normal.len()
            )));
        }
        let mut reflectance = Vec::with_capacity(low.len());
        let mut illumination = Vec::with_capacity(low.len());
        for ((name, l), n) in names.iter().zip(&low).zip(&normal) {
            if (l.height(), l.width()) != (n.height(), n.width()) {
                return Err(Error::Data(format!(
                    "{name}: low is {}x{}, normal is {}x{}",
                    l.height(),
                    l.width(),
                    n.height(),
                    n.width()
                )));
            }
            let pair = decompose_maxchannel(n, delta)?;
            reflectance.push(pair.reflectance);
            illumination.push(pair.illumination);
        }
        Ok(PairedDataset {
            names,
            low,
            normal,
            reflectance,
            illumination,
        })
    }

    /// Reads `root/low` and `root/normal`, which must hold the same file
    /// names.
    pub fn load_dir(root: &Path, delta: f64) -> Result<Self> {
        let pairs = match_files(&root.join("low"), &root.join("normal"))?;
        let mut names = Vec::new();
        let mut low = Vec::new();
        let mut normal = Vec::new();
        for (name, a, b) in pairs {
            low.push(read_image(&a)?);
            normal.push(read_image(&b)?);
            names.push(name);
        }
        PairedDataset::new(names, low, normal, delta)
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    pub fn min_side(&self) -> usize {
        self.low
            .iter()
            .map(|i| i.height().min(i.width()))
            .min()
            .unwrap_or(0)
    }

    /// Random aligned crops (and shared flips) of `batch_size` pairs:
    /// `(reflectance batch, illumination batch)` sharing one condition.
    pub fn sample_batches(&self, config: &TrainConfig, rng: &mut SeededRng) -> Result<(Batch, Batch)> {
        let p = config.patch_size;
        let mut cond = Vec::new();
        let mut refl = Vec::new();
        let mut illum = Vec::new();
        for _ in 0..config.batch_size {
            let i = rng.below(self.len());
            let (h, w) = (self.low[i].height(), self.low[i].width());
            if p > h || p > w {
                return Err(Error::Data(format!(
                    "patch size {p} exceeds image {} ({h}x{w})",
                    self.names[i]
                )));
            }
            let top = rng.below(h - p + 1);
            let left = rng.below(w - p + 1);
            let flip = rng.uniform() < config.flip_prob;
            for (src, dst) in [
                (self.low[i].pixels(), &mut cond),
                (&self.reflectance[i], &mut refl),
                (&self.illumination[i], &mut illum),
            ] {
                let mut t = crop_chw(src, top, left, p)?;
                if flip {
                    t = flip_chw(&t);
                }
                dst.extend_from_slice(t.data());
            }
        }
        let b = config.batch_size;
        let condition = Tensor::new(cond, &[b, 3, p, p])?;
        Ok((
            Batch {
                x0: Tensor::new(refl, &[b, 3, p, p])?,
                condition: condition.clone(),
            },
            Batch {
                x0: Tensor::new(illum, &[b, 1, p, p])?,
                condition,
            },
        ))
    }
}

/// Files present in both directories, by name, in sorted order. Any file
/// present on one side only is reported.
pub fn match_files(a: &Path, b: &Path) -> Result<Vec<(String, std::path::PathBuf, std::path::PathBuf)>> {
    let list = |dir: &Path| -> Result<BTreeSet<String>> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = BTreeSet::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && is_image_path(&path) {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    out.insert(name.to_string());
                }
            }
        }
        Ok(out)
    };
    let (la, lb) = (list(a)?, list(b)?);
    let orphans: Vec<String> = la
        .symmetric_difference(&lb)
        .map(|n| {
            let side = if la.contains(n) { a } else { b };
            side.join(n).display().to_string()
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unmatched files: {}", orphans.join(", "))));
    }
    if la.is_empty() {
        return Err(Error::Data(format!(
            "no images shared by {} and {}",
            a.display(),
            b.display()
        )));
    }
    Ok(la
        .into_iter()
        .map(|n| (n.clone(), a.join(&n), b.join(&n)))
        .collect())
}

/// One logged step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub consist: f64,
    pub fixed: f64,
    pub total: f64,
}

/// The two component models trained together.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub reflectance: DenoiserModel,
    pub illumination: DenoiserModel,
}

/// Per-model optimizer, averaging counter and loss history.
#[derive(Clone, Debug)]
pub struct ComponentState {
    pub optimizer: AdamW,
    pub ema_updates: u64,
    pub history: Vec<LossRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub rng: SeededRng,
    pub reflectance: ComponentState,
    pub illumination: ComponentState,
}

impl TrainState {
    pub fn new(models: &ModelPair, config: &TrainConfig, rng: SeededRng) -> Self {
        let component = |m: &DenoiserModel| ComponentState {
            optimizer: AdamW::new(&m.params, config),
            ema_updates: 0,
            history: Vec::new(),
        };
        TrainState {
            step: 0,
            rng,
            reflectance: component(&models.reflectance),
            illumination: component(&models.illumination),
        }
    }
}

fn component_step(
    model: &mut DenoiserModel,
    state: &mut ComponentState,
    batch: &Batch,
    step: usize,
    config: &TrainConfig,
    sampler: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    let lc = consistency_loss(model, batch, sampler.k_max, rng, config.lambda_consist > 0.0)?;
    let lf = fixed_loss(model, batch, sampler, rng, config.lambda_fixed > 0.0)?;
    let total = lc.scale(config.lambda_consist).add(&lf.scale(config.lambda_fixed))?;
    total.backward()?;
    state.optimizer.step(&mut model.params)?;
    ema_update(model, ema_mu(state.ema_updates))?;
    state.ema_updates += 1;
    state.history.push(LossRecord {
        step,
        consist: lc.item()?,
        fixed: lf.item()?,
        total: total.item()?,
    });
    Ok(())
}

/// Runs `config.iterations` joint steps. `checkpoint` is called after every
/// `checkpoint_every`-th step and after the last one.
pub fn train_loop(
    models: &mut ModelPair,
    dataset: &PairedDataset,
    config: &TrainConfig,
    sampler: &SamplerConfig,
    seed: u64,
    mut checkpoint: impl FnMut(usize, &ModelPair) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    sampler.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let factor = models
        .reflectance
        .config()
        .downsample_factor()
        .max(models.illumination.config().downsample_factor());
    if config.patch_size % factor != 0 || config.patch_size > dataset.min_side() {
        return Err(Error::InvalidArgument(format!(
            "patch size {} must be a multiple of {factor} and fit inside {}x{} images",
            config.patch_size,
            dataset.min_side(),
            dataset.min_side()
        )));
    }
    let mut state = TrainState::new(models, config, SeededRng::new(seed));
    for step in 0..config.iterations {
        let (rb, lb) = dataset.sample_batches(config, &mut state.rng)?;
        component_step(
            &mut models.reflectance,
            &mut state.reflectance,
            &rb,
            step,
            config,
            sampler,
            &mut state.rng,
        )?;
        component_step(
            &mut models.illumination,
            &mut state.illumination,
            &lb,
            step,
            config,
            sampler,
            &mut state.rng,
        )?;
        state.step = step + 1;
        if state.step % config.checkpoint_every == 0 || state.step == config.iterations {
            checkpoint(state.step, models)?;
        }
    }
    Ok(state)
}
