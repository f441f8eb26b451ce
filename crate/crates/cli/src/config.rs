//! Run configuration: one TOML file, every key optional, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use lowlight_cm::net::DenoiserConfig;
use lowlight_cm::retinex::{Degradation, DEFAULT_DELTA};
use lowlight_cm::sampling::SamplerConfig;
use lowlight_cm::schedule::NoiseSchedule;
use lowlight_cm::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub reflectance: NetSection,
    pub illumination: NetSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub enhance: EnhanceSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            schedule: ScheduleSection::default(),
            sampler: SamplerSection::default(),
            reflectance: NetSection::default(),
            illumination: NetSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            enhance: EnhanceSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub n_levels: usize,
    pub rho: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        ScheduleSection {
            sigma_min: s.sigma_min(),
            sigma_max: s.sigma_max(),
            sigma_data: s.sigma_data(),
            n_levels: s.n_levels(),
            rho: s.rho(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub tau: f64,
    pub p_large: f64,
    pub k_max: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            tau: s.tau,
            p_large: s.p_large,
            k_max: s.k_max,
        }
    }
}

/// Width settings of one component network; channel counts follow from the
/// component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub fourier_bands: usize,
    pub groups: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = DenoiserConfig::reflectance();
        NetSection {
            base_width: d.base_width,
            channel_multipliers: d.channel_multipliers,
            fourier_bands: d.fourier_bands,
            groups: d.groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
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
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda_consist: t.lambda_consist,
            lambda_fixed: t.lambda_fixed,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            iterations: t.iterations,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            flip_prob: t.flip_prob,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

/// Toy data generation and the decomposition floor used when loading pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub size: usize,
    pub gamma: f64,
    pub gain: f64,
    pub noise_std: f64,
    pub delta: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = Degradation::default();
        DataSection {
            count: 64,
            size: 32,
            gamma: d.gamma,
            gain: d.gain,
            noise_std: d.noise_std,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceSection {
    pub use_ema: bool,
    /// Appended to the input file stem to name the output.
    pub suffix: String,
}

impl Default for EnhanceSection {
    fn default() -> Self {
        EnhanceSection {
            use_ema: true,
            suffix: "_enhanced".into(),
        }
    }
}

/// Relative paths are taken relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Holds `low/` and `normal/`.
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Defaults to `<out>/checkpoints/reflectance.ckpt`.
    pub reflectance_checkpoint: Option<PathBuf>,
    /// Defaults to `<out>/checkpoints/illumination.ckpt`.
    pub illumination_checkpoint: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: PathBuf::from("data/toy"),
            out: PathBuf::from("runs/default"),
            reflectance_checkpoint: None,
            illumination_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::new("config", e.to_string().trim_end()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::new("config", format!("{}: {}", path.display(), e.message)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        Ok(NoiseSchedule::new(s.sigma_min, s.sigma_max, s.sigma_data, s.n_levels, s.rho)?)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig, CliError> {
        let s = SamplerConfig {
            tau: self.sampler.tau,
            p_large: self.sampler.p_large,
            k_max: self.sampler.k_max,
        };
        s.validate()?;
        if s.k_max >= self.schedule.n_levels {
            return Err(CliError::new(
                "invalid-argument",
                format!(
                    "sampler.k_max = {} needs more than {} schedule levels",
                    s.k_max, self.schedule.n_levels
                ),
            ));
        }
        Ok(s)
    }

    pub fn reflectance_config(&self) -> Result<DenoiserConfig, CliError> {
        net_config(&self.reflectance, 3)
    }

    pub fn illumination_config(&self) -> Result<DenoiserConfig, CliError> {
        net_config(&self.illumination, 1)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let c = TrainConfig {
            lambda_consist: t.lambda_consist,
            lambda_fixed: t.lambda_fixed,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            iterations: t.iterations,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            flip_prob: t.flip_prob,
            checkpoint_every: t.checkpoint_every,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn degradation(&self) -> Result<Degradation, CliError> {
        let d = Degradation {
            gamma: self.data.gamma,
            gain: self.data.gain,
            noise_std: self.data.noise_std,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn reflectance_checkpoint(&self) -> PathBuf {
        self.paths
            .reflectance_checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join("checkpoints").join("reflectance.ckpt"))
    }

    pub fn illumination_checkpoint(&self) -> PathBuf {
        self.paths
            .illumination_checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join("checkpoints").join("illumination.ckpt"))
    }

    /// Checks every section, so that a bad value is reported before any
    /// command starts writing.
    pub fn validate(&self) -> Result<(), CliError> {
        self.noise_schedule()?;
        self.sampler_config()?;
        self.reflectance_config()?;
        self.illumination_config()?;
        self.train_config()?;
        self.degradation()?;
        if !(self.data.delta > 0.0 && self.data.delta < 1.0) {
            return Err(CliError::new(
                "invalid-argument",
                format!("data.delta must lie in (0, 1), got {}", self.data.delta),
            ));
        }
        Ok(())
    }
}

fn net_config(section: &NetSection, out_channels: usize) -> Result<DenoiserConfig, CliError> {
    let c = DenoiserConfig {
        in_channels: out_channels + 3,
        out_channels,
        base_width: section.base_width,
        channel_multipliers: section.channel_multipliers.clone(),
        fourier_bands: section.fourier_bands,
        groups: section.groups,
    };
    c.validate()?;
    Ok(c)
}
