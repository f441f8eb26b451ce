//! Command-line front end for the `lowlight-cm` engine.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lowlight-cm", version, about = "One-step low-light enhancement with conditional consistency models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory: the dataset root for make-toydata, `paths.out`
    /// for every other command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes synthetic low/normal image pairs and a manifest.
    MakeToydata {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Writes the noise grid and its coefficients as CSV.
    InspectSchedule,
    /// Writes a log-sigma histogram of both noise samplers as CSV.
    InspectSampler {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Trains the reflectance and illumination models.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        /// Sets `train.lambda_fixed = 0`.
        #[arg(long)]
        no_fixed_loss: bool,
        /// Sets `sampler.p_large = 0` (plain log-uniform sampling).
        #[arg(long)]
        no_noise_emphasis: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Enhances one image or every image in a directory.
    Enhance {
        /// Defaults to `<paths.dataset>/low`.
        input: Option<PathBuf>,
        #[command(flatten)]
        ema: EmaArgs,
        #[arg(long)]
        suffix: Option<String>,
    },
    /// Scores enhanced images against references.
    Eval {
        /// Defaults to `<paths.out>/enhanced`.
        #[arg(long)]
        enhanced: Option<PathBuf>,
        /// Defaults to `<paths.dataset>/normal`.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        suffix: Option<String>,
    },
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct EmaArgs {
    /// Use the averaged weights (default).
    #[arg(long)]
    pub ema: bool,
    /// Use the live weights.
    #[arg(long)]
    pub no_ema: bool,
}

/// Loads the configuration and applies every override, so the manifest
/// shows exactly what ran.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut c = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        c.seed = seed;
    }
    let out = cli.global.out.clone();
    match &cli.command {
        Command::MakeToydata { count, size } => {
            if let Some(o) = out {
                c.paths.dataset = o;
            }
            if let Some(n) = count {
                c.data.count = *n;
            }
            if let Some(s) = size {
                c.data.size = *s;
            }
        }
        other => {
            if let Some(o) = out {
                c.paths.out = o;
            }
            match other {
                Command::Train {
                    iterations,
                    no_fixed_loss,
                    no_noise_emphasis,
                    dataset,
                } => {
                    if let Some(n) = iterations {
                        c.train.iterations = *n;
                    }
                    if *no_fixed_loss {
                        c.train.lambda_fixed = 0.0;
                    }
                    if *no_noise_emphasis {
                        c.sampler.p_large = 0.0;
                    }
                    if let Some(d) = dataset {
                        c.paths.dataset = d.clone();
                    }
                }
                Command::Enhance { ema, suffix, .. } => {
                    if ema.ema {
                        c.enhance.use_ema = true;
                    }
                    if ema.no_ema {
                        c.enhance.use_ema = false;
                    }
                    if let Some(s) = suffix {
                        c.enhance.suffix = s.clone();
                    }
                }
                Command::Eval { suffix: Some(s), .. } => c.enhance.suffix = s.clone(),
                _ => {}
            }
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::MakeToydata { .. } => {
            let root = commands::make_toydata(&config)?;
            println!("wrote {} pairs to {}", config.data.count, root.display());
        }
        Command::InspectSchedule => {
            let path = commands::inspect_schedule(&config)?;
            println!("wrote {}", path.display());
        }
        Command::InspectSampler { draws, bins } => {
            let path = commands::inspect_sampler(&config, draws, bins)?;
            println!("wrote {}", path.display());
        }
        Command::Train { .. } => {
            let s = commands::train(&config)?;
            match s.last {
                Some((r, l)) => println!(
                    "trained {} steps in {:.1} s; final total loss R {:.6} L {:.6}",
                    s.steps, s.seconds, r.total, l.total
                ),
                None => println!("wrote initial checkpoints (0 steps)"),
            }
        }
        Command::Enhance { input, .. } => {
            let input = input.unwrap_or_else(|| config.paths.dataset.join("low"));
            let records = commands::enhance(&config, &input)?;
            for r in &records {
                println!("{} -> {} ({:.4} s)", r.input.display(), r.output.display(), r.wall_time_seconds);
            }
        }
        Command::Eval { enhanced, reference, .. } => {
            let enhanced = enhanced.unwrap_or_else(|| config.paths.out.join("enhanced"));
            let reference = reference.unwrap_or_else(|| config.paths.dataset.join("normal"));
            let report = commands::eval(&config, &enhanced, &reference)?;
            let m = &report.mean;
            println!(
                "{} images: PSNR {:.4} dB, SSIM {:.4}, MAE {:.4} ({})",
                report.rows.len(),
                m.psnr,
                m.ssim,
                m.mae,
                report.csv_path.display()
            );
        }
    }
    Ok(())
}
