use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use lowlight_cm_cli::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lowlight-cm"))
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(dir: &Path, args: &[&str]) -> (String, i32) {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    (String::from_utf8_lossy(&out.stderr).into_owned(), out.status.code().unwrap())
}

/// Sorted relative paths with their contents.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

const SMALL_NETS: &str = "\
[reflectance]
base_width = 8
channel_multipliers = [1, 2]
fourier_bands = 4
groups = 4

[illumination]
base_width = 8
channel_multipliers = [1, 2]
fourier_bands = 4
groups = 4

[train]
batch_size = 2
patch_size = 16

[data]
count = 4
size = 16
";

fn small_setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL_NETS).unwrap();
    run_ok(dir.path(), &["--config", "small.toml", "make-toydata", "--out", "data"]);
    dir
}

fn small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "small.toml"];
    v.extend_from_slice(args);
    v
}

#[test]
fn toydata_single_pair_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["make-toydata", "--count", "1", "--out", "d"]);
    let files: Vec<PathBuf> = tree(&dir.path().join("d")).into_iter().map(|(p, _)| p).collect();
    assert_eq!(
        files,
        [
            PathBuf::from("low/000.png"),
            PathBuf::from("make-toydata.manifest.toml"),
            PathBuf::from("normal/000.png"),
        ]
    );
    let manifest = fs::read_to_string(dir.path().join("d/make-toydata.manifest.toml")).unwrap();
    let echoed = RunConfig::from_toml(&manifest).unwrap();
    assert_eq!(echoed.data.count, 1);
    assert_eq!(echoed.paths.dataset, Path::new("d"));
}

#[test]
fn toydata_is_deterministic_and_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    run_ok(dir.path(), &["make-toydata", "--seed", "5", "--out", "a"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "64 pairs took {elapsed:.2} s");
    run_ok(dir.path(), &["make-toydata", "--seed", "5", "--out", "b"]);
    run_ok(dir.path(), &["make-toydata", "--seed", "6", "--out", "c"]);
    let (a, b, c) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")), tree(&dir.path().join("c")));
    assert_eq!(a.len(), 2 * 64 + 1);
    // The manifests differ only in the echoed output path.
    let images = |t: &[(PathBuf, Vec<u8>)]| -> Vec<(PathBuf, Vec<u8>)> {
        t.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).cloned().collect()
    };
    assert_eq!(images(&a), images(&b));
    assert_ne!(images(&a), images(&c));
}

#[test]
fn schedule_and_sampler_tables() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["inspect-schedule", "--out", "o"]);
    let csv = fs::read_to_string(dir.path().join("o/schedule.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "level,sigma,c_skip,c_out,c_in,snr_weight");
    assert_eq!(rows.len(), 11);
    let first: Vec<f64> = rows[1].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.002);
    assert_eq!(first[1], 1.0);
    assert_eq!(first[2], 0.0);
    let last: Vec<f64> = rows[10].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 80.0);

    run_ok(dir.path(), &["inspect-sampler", "--out", "o", "--draws", "20000", "--bins", "20"]);
    let csv = fs::read_to_string(dir.path().join("o/sampler_histogram.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.iter().map(|r| r[3]).sum::<f64>(), 20000.0);
    assert_eq!(rows.iter().map(|r| r[4]).sum::<f64>(), 20000.0);
    // The emphasised sampler piles its mass into the top bin.
    assert!(rows[19][4] > 0.9 * 20000.0);
    assert!(rows[19][3] < 0.1 * 20000.0);
    assert!((rows[0][1] - 0.002f64.ln()).abs() < 1e-8);
    assert!((rows[19][2] - 80f64.ln()).abs() < 1e-8);
}

#[test]
fn zero_iterations_write_initial_checkpoints() {
    let dir = small_setup();
    run_ok(dir.path(), &small(&["train", "--iterations", "0", "--dataset", "data", "--out", "run"]));
    let run = dir.path().join("run");
    assert!(run.join("checkpoints/reflectance.ckpt").is_file());
    assert!(run.join("checkpoints/illumination.ckpt").is_file());
    for f in ["loss_reflectance.csv", "loss_illumination.csv"] {
        assert_eq!(fs::read_to_string(run.join(f)).unwrap(), "step,L_consist,L_fixed,L_total\n");
    }
    let m = RunConfig::from_toml(&fs::read_to_string(run.join("train.manifest.toml")).unwrap()).unwrap();
    assert_eq!(m.train.iterations, 0);
}

#[test]
fn training_writes_one_row_per_step() {
    let dir = small_setup();
    run_ok(dir.path(), &small(&["train", "--iterations", "3", "--dataset", "data", "--out", "run"]));
    let csv = fs::read_to_string(dir.path().join("run/loss_reflectance.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.0, 1.0, 2.0]);
    for r in &rows {
        // L_total = 1.0 * L_consist + 0.3 * L_fixed
        assert!((r[3] - (r[1] + 0.3 * r[2])).abs() <= 1e-12 * r[3].abs().max(1.0));
    }
}

#[test]
fn ablation_flags_reach_the_manifest() {
    let dir = small_setup();
    let args = small(&[
        "train",
        "--iterations",
        "0",
        "--dataset",
        "data",
        "--out",
        "run",
        "--no-fixed-loss",
        "--no-noise-emphasis",
    ]);
    run_ok(dir.path(), &args);
    let m = RunConfig::from_toml(&fs::read_to_string(dir.path().join("run/train.manifest.toml")).unwrap()).unwrap();
    assert_eq!(m.train.lambda_fixed, 0.0);
    assert_eq!(m.sampler.p_large, 0.0);
    assert_eq!(m.train.lambda_consist, 1.0);
    assert_eq!(m.sampler.tau, 0.95);
}

#[test]
fn training_rejects_orphans() {
    let dir = small_setup();
    fs::copy(dir.path().join("data/low/000.png"), dir.path().join("data/low/stray.png")).unwrap();
    let (err, code) = run_err(dir.path(), &small(&["train", "--dataset", "data", "--out", "run"]));
    assert_eq!(code, 1);
    assert!(err.starts_with("error[data]:"), "{err}");
    assert!(err.contains("stray.png"), "{err}");
}

#[test]
fn enhance_file_and_directory() {
    let dir = small_setup();
    run_ok(dir.path(), &small(&["train", "--iterations", "2", "--dataset", "data", "--out", "run"]));
    // Checkpoints live under run/; point the other output directories at them.
    let cfg = format!(
        "{SMALL_NETS}\n[paths]\nreflectance_checkpoint = \"run/checkpoints/reflectance.ckpt\"\nillumination_checkpoint = \"run/checkpoints/illumination.ckpt\"\n"
    );
    fs::write(dir.path().join("ck.toml"), cfg).unwrap();
    let (err, _) = run_err(dir.path(), &small(&["enhance", "data/low", "--out", "nowhere"]));
    assert!(err.starts_with("error[checkpoint]:"), "{err}");

    run_ok(dir.path(), &["--config", "ck.toml", "enhance", "data/low/001.png", "--out", "single"]);
    let csv = fs::read_to_string(dir.path().join("single/enhanced/enhance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("001.png,001_enhanced.png,"));
    assert!(dir.path().join("single/enhanced/001_enhanced.png").is_file());

    run_ok(dir.path(), &["--config", "ck.toml", "enhance", "data/low", "--out", "a"]);
    run_ok(dir.path(), &["--config", "ck.toml", "enhance", "data/low", "--out", "b"]);
    let csv = fs::read_to_string(dir.path().join("a/enhanced/enhance.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["000.png", "001.png", "002.png", "003.png"]);
    let png = |t: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        t.into_iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).collect()
    };
    let a = png(tree(&dir.path().join("a/enhanced")));
    assert_eq!(a.len(), 4);
    assert_eq!(a, png(tree(&dir.path().join("b/enhanced"))));

    run_ok(dir.path(), &["--config", "ck.toml", "enhance", "data/low", "--out", "live", "--no-ema"]);
    let m = fs::read_to_string(dir.path().join("live/enhance.manifest.toml")).unwrap();
    assert!(!RunConfig::from_toml(&m).unwrap().enhance.use_ema);
    let m = fs::read_to_string(dir.path().join("a/enhance.manifest.toml")).unwrap();
    assert!(RunConfig::from_toml(&m).unwrap().enhance.use_ema);
}

#[test]
fn enhance_wall_time_per_image() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["make-toydata", "--count", "8", "--out", "data"]);
    run_ok(dir.path(), &["train", "--iterations", "0", "--dataset", "data", "--out", "run"]);
    run_ok(dir.path(), &["enhance", "data/low", "--out", "run"]);
    let csv = fs::read_to_string(dir.path().join("run/enhanced/enhance.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let t: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(t < 0.5, "{line}");
    }
}

#[test]
fn eval_identity_and_errors() {
    let dir = small_setup();
    run_ok(
        dir.path(),
        &["eval", "--enhanced", "data/normal", "--reference", "data/normal", "--suffix", "", "--out", "e"],
    );
    let csv = fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "filename,psnr_rgb_db,ssim,mae,wall_time_seconds");
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().last().unwrap(), "mean,99.000000,1.000000,0.000000,");

    // Default suffix: nothing in normal/ ends in "_enhanced".
    let (err, _) = run_err(dir.path(), &["eval", "--enhanced", "data/normal", "--reference", "data/low", "--out", "e"]);
    assert!(err.starts_with("error[data]: unmatched files"), "{err}");

    fs::create_dir_all(dir.path().join("x")).unwrap();
    fs::create_dir_all(dir.path().join("y")).unwrap();
    fs::copy(dir.path().join("data/low/000.png"), dir.path().join("x/a.png")).unwrap();
    fs::copy(dir.path().join("data/low/000.png"), dir.path().join("y/b.png")).unwrap();
    let (err, _) = run_err(dir.path(), &["eval", "--enhanced", "x", "--reference", "y", "--suffix", "", "--out", "e"]);
    assert!(err.contains("x/a.png") && err.contains("y/b.png"), "{err}");
}

#[test]
fn eval_rejects_empty_directories() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("x")).unwrap();
    fs::create_dir_all(dir.path().join("y")).unwrap();
    let (err, code) = run_err(dir.path(), &["eval", "--enhanced", "x", "--reference", "y", "--out", "e"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[data]:"), "{err}");
}

#[test]
fn config_and_usage_errors_are_categorised() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rat = 1.0\n").unwrap();
    let (err, code) = run_err(dir.path(), &["--config", "bad.toml", "inspect-schedule"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[config]:") && err.contains("learning_rat"), "{err}");

    fs::write(dir.path().join("range.toml"), "[sampler]\np_large = 1.5\n").unwrap();
    let (err, _) = run_err(dir.path(), &["--config", "range.toml", "inspect-schedule"]);
    assert!(err.starts_with("error[invalid-argument]:"), "{err}");

    let (err, code) = run_err(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]:"), "{err}");

    let (err, _) = run_err(dir.path(), &["--config", "missing.toml", "inspect-schedule"]);
    assert!(err.starts_with("error[io]:"), "{err}");
}

#[test]
fn manifest_can_be_replayed() {
    let dir = small_setup();
    run_ok(dir.path(), &small(&["--seed", "9", "train", "--iterations", "2", "--dataset", "data", "--out", "r1"]));
    fs::copy(dir.path().join("r1/train.manifest.toml"), dir.path().join("replay.toml")).unwrap();
    run_ok(dir.path(), &["--config", "replay.toml", "train", "--out", "r2"]);
    for f in ["loss_reflectance.csv", "loss_illumination.csv", "checkpoints/reflectance.ckpt"] {
        assert_eq!(
            fs::read(dir.path().join("r1").join(f)).unwrap(),
            fs::read(dir.path().join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
}
