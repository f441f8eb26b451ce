use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lowlight_cm::enhance::one_step_enhance;
use lowlight_cm::imageio::{is_image_path, read_image, write_image};
use lowlight_cm::metrics::{mae, psnr, ssim};
use lowlight_cm::net::DenoiserModel;
use lowlight_cm::retinex::make_toy_pair;
use lowlight_cm::sampling::{sample_bimodal, SamplerConfig, SeededRng};
use lowlight_cm::train::{train_loop, LossRecord, ModelPair, PairedDataset};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Stream offsets of the run seed, one per independent consumer.
const STREAM_MODEL_INIT: u64 = 1;
const STREAM_SAMPLER_STANDARD: u64 = 2;
const STREAM_SAMPLER_BIMODAL: u64 = 3;
const STREAM_ENHANCE: u64 = 1 << 32;

pub const LOSS_HEADER: &str = "step,L_consist,L_fixed,L_total";
pub const EVAL_HEADER: &str = "filename,psnr_rgb_db,ssim,mae,wall_time_seconds";
pub const ENHANCE_CSV: &str = "enhance.csv";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Writes the resolved configuration as TOML, preceded by comment lines.
/// The file can be passed back through `--config`.
pub fn write_manifest(dir: &Path, command: &str, config: &RunConfig, extra: &[(&str, String)]) -> Result<PathBuf> {
    let mut text = format!(
        "# lowlight-cm {} {command}\n",
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in extra {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    text.push('\n');
    text.push_str(&config.to_toml());
    let path = dir.join(format!("{command}.manifest.toml"));
    write_file(&path, &text)?;
    Ok(path)
}

pub fn make_toydata(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let d = config.degradation()?;
    let root = &config.paths.dataset;
    let (low_dir, normal_dir) = (root.join("low"), root.join("normal"));
    create_dir(&low_dir)?;
    create_dir(&normal_dir)?;
    write_manifest(root, "make-toydata", config, &[])?;
    let mut rng = SeededRng::new(config.seed);
    let digits = config.data.count.max(1).to_string().len().max(3);
    for i in 0..config.data.count {
        let (low, normal) = make_toy_pair(&mut rng, config.data.size, d.gamma, d.gain, d.noise_std)?;
        let name = format!("{i:0digits$}.png");
        write_image(&low_dir.join(&name), &low)?;
        write_image(&normal_dir.join(&name), &normal)?;
    }
    Ok(root.clone())
}

/// Grid table: level index (0 = least noise), sigma and the coefficients.
pub fn inspect_schedule(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let s = config.noise_schedule()?;
    let out = &config.paths.out;
    write_manifest(out, "inspect-schedule", config, &[])?;
    let mut csv = String::from("level,sigma,c_skip,c_out,c_in,snr_weight\n");
    for n in 0..s.n_levels() {
        let sigma = s.level_sigma(n)?;
        let p = s.precondition(sigma)?;
        csv.push_str(&format!(
            "{n},{sigma:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            p.c_skip,
            p.c_out,
            p.c_in,
            s.snr_weight(sigma)?
        ));
    }
    let path = out.join("schedule.csv");
    write_file(&path, &csv)?;
    Ok(path)
}

/// Histogram over `ln sigma` of the plain log-uniform sampler and the
/// configured noise-emphasised one.
pub fn inspect_sampler(config: &RunConfig, draws: usize, bins: usize) -> Result<PathBuf> {
    config.validate()?;
    if draws == 0 || bins == 0 {
        return Err(CliError::new("invalid-argument", "draws and bins must be positive"));
    }
    let s = config.noise_schedule()?;
    let bimodal = config.sampler_config()?;
    let standard = SamplerConfig {
        p_large: 0.0,
        ..bimodal
    };
    let out = &config.paths.out;
    write_manifest(
        out,
        "inspect-sampler",
        config,
        &[("draws", draws.to_string()), ("bins", bins.to_string())],
    )?;
    let (lo, hi) = (s.sigma_min().ln(), s.sigma_max().ln());
    let width = (hi - lo) / bins as f64;
    let root = SeededRng::new(config.seed);
    let histogram = |sampler: &SamplerConfig, stream: u64| -> Result<Vec<usize>> {
        let mut rng = root.fork(stream);
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let sigma = sample_bimodal(&mut rng, &s, sampler)?;
            let b = (((sigma.ln() - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(counts)
    };
    let a = histogram(&standard, STREAM_SAMPLER_STANDARD)?;
    let b = histogram(&bimodal, STREAM_SAMPLER_BIMODAL)?;
    let mut csv = String::from("bin,log_sigma_lo,log_sigma_hi,count_standard,count_bimodal\n");
    for i in 0..bins {
        let edge = |k: usize| if k == bins { hi } else { lo + k as f64 * width };
        csv.push_str(&format!("{i},{:.9},{:.9},{},{}\n", edge(i), edge(i + 1), a[i], b[i]));
    }
    let path = out.join("sampler_histogram.csv");
    write_file(&path, &csv)?;
    Ok(path)
}

fn new_models(config: &RunConfig) -> Result<ModelPair> {
    let schedule = config.noise_schedule()?;
    let mut rng = SeededRng::new(config.seed).fork(STREAM_MODEL_INIT);
    Ok(ModelPair {
        reflectance: DenoiserModel::new(config.reflectance_config()?, schedule, &mut rng)?,
        illumination: DenoiserModel::new(config.illumination_config()?, schedule, &mut rng)?,
    })
}

fn save_models(config: &RunConfig, models: &ModelPair) -> Result<()> {
    for (path, model) in [
        (config.reflectance_checkpoint(), &models.reflectance),
        (config.illumination_checkpoint(), &models.illumination),
    ] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        model.save(&path)?;
    }
    Ok(())
}

fn loss_csv(history: &[LossRecord]) -> String {
    let mut csv = format!("{LOSS_HEADER}\n");
    for r in history {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            r.step, r.consist, r.fixed, r.total
        ));
    }
    csv
}

pub struct TrainSummary {
    pub steps: usize,
    pub seconds: f64,
    pub last: Option<(LossRecord, LossRecord)>,
}

/// Trains both component models on `paths.dataset`. Checkpoints go to the
/// configured paths (overwritten at every checkpoint); loss histories go to
/// `<out>/loss_reflectance.csv` and `<out>/loss_illumination.csv`.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let train_cfg = config.train_config()?;
    let sampler = config.sampler_config()?;
    let out = &config.paths.out;
    create_dir(out)?;
    write_manifest(out, "train", config, &[])?;
    let dataset = PairedDataset::load_dir(&config.paths.dataset, config.data.delta)?;
    let mut models = new_models(config)?;
    let start = std::time::Instant::now();
    save_models(config, &models)?;
    let state = train_loop(&mut models, &dataset, &train_cfg, &sampler, config.seed, |_, m| {
        save_models(config, m).map_err(|e| lowlight_cm::Error::Checkpoint(e.message))
    })?;
    write_file(&out.join("loss_reflectance.csv"), &loss_csv(&state.reflectance.history))?;
    write_file(&out.join("loss_illumination.csv"), &loss_csv(&state.illumination.history))?;
    let last = state
        .reflectance
        .history
        .last()
        .copied()
        .zip(state.illumination.history.last().copied());
    Ok(TrainSummary {
        steps: state.step,
        seconds: start.elapsed().as_secs_f64(),
        last,
    })
}

pub fn load_models(config: &RunConfig) -> Result<ModelPair> {
    let mut models = new_models(config)?;
    for (path, model) in [
        (config.reflectance_checkpoint(), &mut models.reflectance),
        (config.illumination_checkpoint(), &mut models.illumination),
    ] {
        if !path.is_file() {
            return Err(CliError::new(
                "checkpoint",
                format!("missing checkpoint {}", path.display()),
            ));
        }
        model.load(&path)?;
    }
    Ok(models)
}

/// Images to process: the file itself, or every image in the directory in
/// name order.
fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::new("io", format!("{}: no such file or directory", input.display())));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| io_error(input, e))? {
        let path = entry.map_err(|e| io_error(input, e))?.path();
        if path.is_file() && is_image_path(&path) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::new("data", format!("no images in {}", input.display())));
    }
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn file_name(path: &Path) -> String {
    path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

pub struct EnhanceRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    pub wall_time_seconds: f64,
    pub evaluations: usize,
}

/// One-step enhancement of `input` (a file or a directory). Outputs are
/// PNGs named `<stem><suffix>.png` in `<out>/enhanced`, which also receives
/// a timing CSV.
pub fn enhance(config: &RunConfig, input: &Path) -> Result<Vec<EnhanceRecord>> {
    config.validate()?;
    let out_dir = config.paths.out.join("enhanced");
    let files = list_inputs(input)?;
    create_dir(&out_dir)?;
    write_manifest(
        &config.paths.out,
        "enhance",
        config,
        &[("input", input.display().to_string())],
    )?;
    let models = load_models(config)?;
    let root = SeededRng::new(config.seed);
    let mut records = Vec::new();
    let mut csv = String::from("filename,output,wall_time_seconds\n");
    for (i, path) in files.iter().enumerate() {
        let low = read_image(path)?;
        let mut rng = root.fork(STREAM_ENHANCE + i as u64);
        models.reflectance.reset_evaluations();
        models.illumination.reset_evaluations();
        let result = one_step_enhance(&models, &low, &mut rng, config.enhance.use_ema)?;
        let evaluations = models.reflectance.evaluations() + models.illumination.evaluations();
        let output = out_dir.join(format!("{}{}.png", file_stem(path), config.enhance.suffix));
        write_image(&output, &result.enhanced)?;
        csv.push_str(&format!(
            "{},{},{:.6}\n",
            file_name(path),
            file_name(&output),
            result.wall_time_seconds
        ));
        records.push(EnhanceRecord {
            input: path.clone(),
            output,
            wall_time_seconds: result.wall_time_seconds,
            evaluations,
        });
    }
    write_file(&out_dir.join(ENHANCE_CSV), &csv)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub filename: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub wall_time_seconds: Option<f64>,
}

/// Per-image rows followed by their mean.
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    pub csv_path: PathBuf,
}

/// Wall times recorded by `enhance`, keyed by output file name.
fn read_wall_times(dir: &Path) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(dir.join(ENHANCE_CSV)) {
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if let [_, output, t] = cols[..] {
                if let Ok(t) = t.parse() {
                    out.insert(output.to_string(), t);
                }
            }
        }
    }
    out
}

/// Pairs `<stem><suffix>.<ext>` in `enhanced` with `<stem>.<ext>` in
/// `reference`. Files without a partner on either side are an error.
fn match_with_suffix(enhanced: &Path, reference: &Path, suffix: &str) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let keyed = |dir: &Path, strip: &str| -> Result<(BTreeMap<String, PathBuf>, Vec<PathBuf>)> {
        let mut map = BTreeMap::new();
        let mut stray = Vec::new();
        for path in list_inputs(dir)? {
            match file_stem(&path).strip_suffix(strip) {
                Some(stem) => {
                    if let Some(prev) = map.insert(stem.to_string(), path.clone()) {
                        return Err(CliError::new(
                            "data",
                            format!("{} and {} share a name", prev.display(), path.display()),
                        ));
                    }
                }
                None => stray.push(path),
            }
        }
        Ok((map, stray))
    };
    let (enh, mut orphans) = keyed(enhanced, suffix)?;
    let (refs, _) = keyed(reference, "")?;
    orphans.extend(enh.iter().filter(|(k, _)| !refs.contains_key(*k)).map(|(_, p)| p.clone()));
    orphans.extend(refs.iter().filter(|(k, _)| !enh.contains_key(*k)).map(|(_, p)| p.clone()));
    if !orphans.is_empty() {
        let list: Vec<String> = orphans.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::new("data", format!("unmatched files: {}", list.join(", "))));
    }
    if enh.is_empty() {
        return Err(CliError::new("data", "no matched image pairs"));
    }
    Ok(enh
        .into_iter()
        .map(|(stem, e)| {
            let r = refs[&stem].clone();
            (file_name(&e), e, r)
        })
        .collect())
}

/// RGB metrics of every enhanced image against its reference, written to
/// `<out>/eval.csv` with a final `mean` row.
pub fn eval(config: &RunConfig, enhanced: &Path, reference: &Path) -> Result<EvalReport> {
    config.validate()?;
    let out = &config.paths.out;
    create_dir(out)?;
    write_manifest(
        out,
        "eval",
        config,
        &[
            ("enhanced", enhanced.display().to_string()),
            ("reference", reference.display().to_string()),
        ],
    )?;
    let pairs = match_with_suffix(enhanced, reference, &config.enhance.suffix)?;
    let times = read_wall_times(enhanced);
    let mut rows = Vec::new();
    for (name, e, r) in pairs {
        let (a, b) = (read_image(&e)?, read_image(&r)?);
        rows.push(EvalRow {
            psnr: psnr(&a, &b)?,
            ssim: ssim(&a, &b)?,
            mae: mae(&a, &b)?,
            wall_time_seconds: times.get(&name).copied(),
            filename: name,
        });
    }
    let n = rows.len() as f64;
    let timed: Vec<f64> = rows.iter().filter_map(|r| r.wall_time_seconds).collect();
    let mean = EvalRow {
        filename: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        wall_time_seconds: (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64),
    };
    let mut csv = format!("{EVAL_HEADER}\n");
    for r in rows.iter().chain([&mean]) {
        let t = r.wall_time_seconds.map(|t| format!("{t:.6}")).unwrap_or_default();
        csv.push_str(&format!("{},{:.6},{:.6},{:.6},{t}\n", r.filename, r.psnr, r.ssim, r.mae));
    }
    let csv_path = out.join("eval.csv");
    write_file(&csv_path, &csv)?;
    Ok(EvalReport { rows, mean, csv_path })
}
