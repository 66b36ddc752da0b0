//! The `unmix-ldvae` command line: `synth`, `train`, `eval` and `unmix`.
//!
//! Every subcommand reads an optional JSON config file, applies flag
//! overrides on top, prints the effective config as one JSON document on
//! stdout and writes its artifacts under `--out`. Failures are reported as a
//! single JSON line on stderr with a nonzero exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    load_cube, save_abundances, save_bundles, save_cube, split_pixels, synth_scene, BundleSet, DataError,
    EndmemberBundle, HsiCube, SceneConfig,
};
use crate::metrics::{EvalReport, MetricError};
use crate::model::{Ldvae, ModelError, PixelPrediction};
use crate::numcore::linalg;
use crate::train::{fit, RunPaths, TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Data(_) => "data",
            CliError::Train(_) => "train",
            CliError::Metric(_) => "metric",
            CliError::Model(_) => "model",
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
        }
    }

    /// One-line JSON error document.
    pub fn to_json_line(&self) -> String {
        let mut chain = self.to_string();
        let mut src = std::error::Error::source(self);
        while let Some(e) = src {
            let msg = e.to_string();
            if !chain.contains(&msg) {
                let _ = write!(chain, ": {msg}");
            }
            src = e.source();
        }
        serde_json::json!({ "error": self.kind(), "message": chain }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "unmix-ldvae", version, about = "Hyperspectral unmixing with bundled endmembers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Train a model on a cube that carries ground truth.
    Train(TrainArgs),
    /// Score a checkpoint against ground truth and export plot data.
    Eval(EvalArgs),
    /// Predict abundance maps and bundle estimates without ground truth.
    Unmix(UnmixArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file with optional `seed`, `scene` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// File stem of the written cube inside `--out`.
    #[arg(long, default_value = "scene")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Cube to train on (`.bsq`, `.json` or the bare stem).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct UnmixArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

/// Contents of a `--config` file. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Overrides `train.seed` and seeds scene synthesis.
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// File config (or defaults) with flag overrides applied.
    pub fn resolve(common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let seed = common.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
        cfg.train.seed = seed;
        cfg.seed = Some(seed);
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

fn echo<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("config serialises"));
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Files written by [`cmd_synth`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub cube: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthOutput> {
    let cfg = CliConfig::resolve(&args.common)?;
    cfg.scene.validate()?;
    echo(&serde_json::json!({ "command": "synth", "seed": cfg.seed(), "scene": cfg.scene }));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let cube = synth_scene(&cfg.scene, &mut rng)?;
    ensure_dir(&args.common.out)?;
    let stem = args.common.out.join(&args.name);
    save_cube(&stem, &cube)?;
    info!("wrote {}", stem.display());
    Ok(SynthOutput {
        cube: stem.with_extension("bsq"),
    })
}

/// Take band count, endmember count and segment length from the data.
fn adapt_model_to_cube(cfg: &mut TrainConfig, cube: &HsiCube) {
    cfg.model.bands = cube.bands;
    if let Some(k) = cube.endmembers() {
        cfg.model.endmembers = k;
    }
    if let Some(b) = &cube.gt_bundles {
        cfg.model.seg_len = b.seg_len;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunPaths> {
    let mut cfg = CliConfig::resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let cube = load_cube(&args.data)?;
    if cube.gt_abundances.is_none() || cube.gt_bundles.is_none() {
        return Err(TrainError::MissingGroundTruth("ground-truth abundances and bundles next to the cube").into());
    }
    adapt_model_to_cube(&mut cfg.train, &cube);
    cfg.train.validate()?;
    echo(&serde_json::json!({ "command": "train", "train": cfg.train }));
    ensure_dir(&args.common.out)?;
    let paths = RunPaths::in_dir(&args.common.out);
    let outcome = fit(&cfg.train, &cube, &paths, args.resume.as_deref())?;
    info!("trained to epoch {}", outcome.state.epoch);
    Ok(paths)
}

fn load_model_for(checkpoint: &Path, cube: &HsiCube) -> Result<TrainState> {
    let state = TrainState::load(checkpoint)?;
    if state.model.config.bands != cube.bands {
        return Err(CliError::Config {
            field: "bands".into(),
            msg: format!("checkpoint expects {} bands, cube has {}", state.model.config.bands, cube.bands),
        });
    }
    Ok(state)
}

fn predict_all(model: &Ldvae, cube: &HsiCube) -> Result<Vec<PixelPrediction>> {
    (0..cube.pixels())
        .map(|p| model.infer_pixel(cube, p).map_err(CliError::from))
        .collect()
}

fn flat_abundances(preds: &[PixelPrediction]) -> Vec<f64> {
    preds.iter().flat_map(|p| p.abundances.iter().copied()).collect()
}

fn mean_spectra(preds: &[PixelPrediction], pixels: &[usize]) -> Vec<Vec<f64>> {
    let k = preds[0].means.len();
    let c = preds[0].means[0].len();
    let mut sums = vec![vec![0.0; c]; k];
    for &p in pixels {
        for (acc, m) in sums.iter_mut().zip(&preds[p].means) {
            acc.iter_mut().zip(m).for_each(|(a, v)| *a += v);
        }
    }
    let n = pixels.len() as f64;
    sums.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= n));
    sums
}

/// Files written by [`cmd_eval`].
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub metrics: PathBuf,
    pub abundances: PathBuf,
    pub spectra: PathBuf,
}

/// Score the held-out pixels of the split the checkpoint was trained with.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let cfg = CliConfig::resolve(&args.common)?;
    let cube = load_cube(&args.data)?;
    let state = load_model_for(&args.checkpoint, &cube)?;
    // without an explicit seed, reuse the one stored with the run
    let seed = match (args.common.seed, &args.common.config) {
        (Some(s), _) => s,
        (None, Some(_)) => cfg.seed(),
        (None, None) => state.seed,
    };
    let gt = cube
        .gt_bundles
        .as_ref()
        .ok_or(MetricError::MissingGroundTruth("cube has no ground-truth bundles"))?;
    let gt_ab = cube
        .gt_abundances
        .as_ref()
        .ok_or(MetricError::MissingGroundTruth("cube has no ground-truth abundances"))?;
    let split = split_pixels(cube.pixels(), cfg.train.train_fraction, seed);
    let eval_pixels = if split.test_indices.is_empty() {
        split.train_indices.clone()
    } else {
        split.test_indices.clone()
    };
    echo(&serde_json::json!({
        "command": "eval",
        "checkpoint": args.checkpoint,
        "seed": seed,
        "train_fraction": cfg.train.train_fraction,
        "eval_pixels": eval_pixels.len(),
        "model": state.model.config,
    }));

    let preds = predict_all(&state.model, &cube)?;
    let all = flat_abundances(&preds);
    let k = state.model.config.endmembers;
    let pick = |src: &[f64]| -> Vec<f64> { eval_pixels.iter().flat_map(|&p| src[p * k..(p + 1) * k].to_vec()).collect() };
    let names: Vec<String> = gt.endmembers.iter().map(|e| e.name.clone()).collect();
    let pred_means = mean_spectra(&preds, &eval_pixels);
    let gt_means = gt.means();
    let report = EvalReport::compute(names.clone(), &pred_means, &gt_means, &pick(&all), &pick(gt_ab))?;

    ensure_dir(&args.common.out)?;
    let metrics = args.common.out.join("metrics.csv");
    report.write_csv(&metrics)?;

    // abundance bands reordered to ground-truth order
    let mut aligned = vec![0.0; all.len()];
    for (src, dst) in all.chunks(k).zip(aligned.chunks_mut(k)) {
        for (p, &g) in report.assignment.iter().enumerate() {
            dst[g] = src[p];
        }
    }
    let abundances = args.common.out.join("abundances");
    save_abundances(&abundances, cube.height, cube.width, k, &aligned)?;

    let mut pred_by_gt = vec![Vec::new(); k];
    for (p, &g) in report.assignment.iter().enumerate() {
        pred_by_gt[g] = pred_means[p].clone();
    }
    let spectra = args.common.out.join("spectra.csv");
    fs::write(&spectra, spectra_csv(&names, &pred_by_gt, &gt_means)).map_err(io_err(&spectra))?;
    info!("avg SAD {:.6} rad, avg RMSE {:.6}", report.avg_sad, report.avg_rmse);
    Ok(EvalOutput {
        report,
        metrics,
        abundances: abundances.with_extension("bsq"),
        spectra,
    })
}

/// `band,<name>_pred,<name>_gt,...` with one row per band.
pub fn spectra_csv(names: &[String], pred: &[Vec<f64>], gt: &[Vec<f64>]) -> String {
    let mut s = String::from("band");
    for n in names {
        let _ = write!(s, ",{n}_pred,{n}_gt");
    }
    s.push('\n');
    let bands = gt.first().map_or(0, Vec::len);
    for b in 0..bands {
        let _ = write!(s, "{b}");
        for (p, g) in pred.iter().zip(gt) {
            let _ = write!(s, ",{:e},{:e}", p[b], g[b]);
        }
        s.push('\n');
    }
    s
}

/// Scene-level bundles from per-pixel predictions: means are averaged and
/// each block covariance is the mean within-pixel covariance plus the
/// spread of the pixel means.
pub fn aggregate_bundles(preds: &[PixelPrediction], seg_len: usize, names: &[String]) -> Result<BundleSet> {
    let pixels: Vec<usize> = (0..preds.len()).collect();
    let means = mean_spectra(preds, &pixels);
    let n = preds.len() as f64;
    let mut endmembers = Vec::with_capacity(means.len());
    for (k, mean) in means.into_iter().enumerate() {
        let mut chol_blocks = Vec::new();
        let mut start = 0;
        for block in &preds[0].cov_blocks[k] {
            let len = block.shape()[0];
            let mut cov = vec![0.0; len * len];
            for p in preds {
                let within = linalg::outer_lower(p.cov_blocks[k][chol_blocks.len()].data(), len);
                let d: Vec<f64> = (0..len).map(|i| p.means[k][start + i] - mean[start + i]).collect();
                for i in 0..len {
                    for j in 0..len {
                        cov[i * len + j] += (within[i * len + j] + d[i] * d[j]) / n;
                    }
                }
            }
            let l = cholesky_jittered(&mut cov, len).ok_or_else(|| CliError::Config {
                field: "bundles".into(),
                msg: format!("aggregated covariance of endmember {k} is not positive definite"),
            })?;
            chol_blocks.push(l.chunks(len).map(<[f64]>::to_vec).collect());
            start += len;
        }
        endmembers.push(EndmemberBundle {
            name: names.get(k).cloned().unwrap_or_else(|| format!("em{k}")),
            mean,
            chol_blocks,
        });
    }
    Ok(BundleSet { seg_len, endmembers })
}

fn cholesky_jittered(cov: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| cov[i * n + i]).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..8 {
        if let Some(l) = linalg::cholesky(cov, n) {
            return Some(l);
        }
        let next = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
        for i in 0..n {
            cov[i * n + i] += next - jitter;
        }
        jitter = next;
    }
    None
}

/// Files written by [`cmd_unmix`].
#[derive(Clone, Debug)]
pub struct UnmixOutput {
    pub abundances: PathBuf,
    pub bundles: PathBuf,
}

pub fn cmd_unmix(args: &UnmixArgs) -> Result<UnmixOutput> {
    let cfg = CliConfig::resolve(&args.common)?;
    let cube = load_cube(&args.data)?;
    let state = load_model_for(&args.checkpoint, &cube)?;
    echo(&serde_json::json!({
        "command": "unmix",
        "checkpoint": args.checkpoint,
        "seed": cfg.seed(),
        "model": state.model.config,
    }));
    let preds = predict_all(&state.model, &cube)?;
    let k = state.model.config.endmembers;
    ensure_dir(&args.common.out)?;
    let abundances = args.common.out.join("abundances");
    save_abundances(&abundances, cube.height, cube.width, k, &flat_abundances(&preds))?;
    let names: Vec<String> = (0..k).map(|i| format!("em{i}")).collect();
    let set = aggregate_bundles(&preds, state.model.config.seg_len, &names)?;
    let bundles = args.common.out.join("bundles.json");
    save_bundles(&bundles, &set)?;
    Ok(UnmixOutput {
        abundances: abundances.with_extension("bsq"),
        bundles,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Unmix(a) => cmd_unmix(&a).map(|_| ()),
    }
}

/// Process entry point; returns the exit code.
pub fn main_entry() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).to_json_line());
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            1
        }
    }
}
