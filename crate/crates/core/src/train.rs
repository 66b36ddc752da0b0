//! Adam, the supervised training loop and resumable checkpoints.
//!
//! Every epoch draws its shuffling order and sampling noise from a ChaCha
//! stream keyed by `(seed, epoch)`, so a run restarted from any checkpoint
//! follows the same parameter trajectory as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    estimate_bundles, extract_patch, ppi_scores, split_pixels, DataError, HsiCube, SplitSpec,
    DEFAULT_PURITY_QUANTILE, DEFAULT_SKEWERS, DEFAULT_TRAIN_FRACTION,
};
use crate::losses::{
    kl_bundle, kl_dirichlet, loss_abundance, loss_recon, total_loss, BundleTarget, LossBreakdown, LossError,
    LossTerms, LossWeights,
};
use crate::model::{read_checkpoint, write_checkpoint, Ldvae, ModelConfig, ModelError, ParamStore, Sampling};
use crate::numcore::{NoiseStream, NumError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid train config `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("supervised training needs {0}")]
    MissingGroundTruth(&'static str),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Start the bundle decoder from PPI-estimated bundles of the cube.
    pub init_from_ppi: bool,
    pub ppi_skewers: usize,
    pub purity_quantile: f64,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            init_from_ppi: true,
            ppi_skewers: DEFAULT_SKEWERS,
            purity_quantile: DEFAULT_PURITY_QUANTILE,
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: String| Err(TrainError::Config { field, msg });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", format!("must lie in [0, 1), got {}", self.adam_beta1));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", format!("must lie in [0, 1), got {}", self.adam_beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", format!("must be > 0, got {}", self.adam_eps));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction", format!("must lie in (0, 1], got {}", self.train_fraction));
        }
        if !(0.0..1.0).contains(&self.purity_quantile) {
            return bad("purity_quantile", format!("must lie in [0, 1), got {}", self.purity_quantile));
        }
        self.loss_weights.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One Adam update with bias correction. Parameters without a gradient
/// entry are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            _ => return Err(TrainError::Checkpoint(format!("gradient for unknown parameter `{name}`"))),
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Per-pixel supervision.
pub struct PixelSample<'a> {
    pub patch: &'a Tensor,
    pub spectrum: &'a [f64],
    pub abundance: &'a [f64],
}

/// Forward one pixel, build the total loss and return it with the
/// parameter gradients.
pub fn pixel_loss_and_grads(
    model: &Ldvae,
    sample: &PixelSample<'_>,
    target: &BundleTarget,
    weights: &LossWeights,
    epoch: usize,
    noise: &mut NoiseStream,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let f = model.forward(&tape, &bound, sample.patch, noise, Sampling::Sample)?;
    let x = tape.constant(Tensor::vector(sample.spectrum.to_vec()));
    let z_gt = tape.constant(Tensor::vector(sample.abundance.to_vec()));
    let prior = tape.constant(Tensor::vector(weights.prior(model.config.endmembers)?));
    let parts = LossTerms {
        recon: loss_recon(f.x_recon, x)?,
        kl_dirichlet: kl_dirichlet(f.alpha, prior)?,
        abundance: loss_abundance(f.z, z_gt)?,
        endmember: kl_bundle(&f.bundles, target, f.alpha)?,
    };
    let (total, breakdown) = total_loss(parts, weights, epoch)?;
    let mut grads = tape.backward(total)?;
    let out = bound
        .iter()
        .filter_map(|(name, var)| grads.take(*var).map(|g| (name.clone(), g)))
        .collect();
    Ok((breakdown, out))
}

/// Stream id separating the sampling noise from the shuffle within an epoch.
const NOISE_STREAM: u64 = 1 << 32;

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + epoch as u64);
    rng
}

/// Training data prepared once per run.
pub struct TrainSet {
    pub pixels: Vec<usize>,
    patches: Vec<Tensor>,
    spectra: Vec<Vec<f64>>,
    abundances: Vec<Vec<f64>>,
}

impl TrainSet {
    pub fn new(cube: &HsiCube, pixels: &[usize], patch: usize) -> Result<Self> {
        if cube.gt_abundances.is_none() {
            return Err(TrainError::MissingGroundTruth("ground-truth abundances"));
        }
        let mut set = Self {
            pixels: pixels.to_vec(),
            patches: Vec::with_capacity(pixels.len()),
            spectra: Vec::with_capacity(pixels.len()),
            abundances: Vec::with_capacity(pixels.len()),
        };
        for &p in pixels {
            set.patches.push(extract_patch(cube, p / cube.width, p % cube.width, patch)?);
            set.spectra.push(cube.spectrum(p).to_vec());
            set.abundances.push(cube.abundance(p).expect("checked").to_vec());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// One pass over the training pixels in seeded random order, one Adam step
/// per batch on the batch-mean gradient. Returns the epoch-mean losses.
pub fn train_epoch(
    model: &mut Ldvae,
    data: &TrainSet,
    target: &BundleTarget,
    adam: &mut AdamState,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(TrainError::Config {
            field: "train_fraction",
            msg: "no training pixels".into(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
    let mut noise = NoiseStream::from_rng(epoch_rng(cfg.seed, epoch, NOISE_STREAM));
    let mut sum = LossBreakdown::default();
    for batch in order.chunks(cfg.batch_size) {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for &i in batch {
            let sample = PixelSample {
                patch: &data.patches[i],
                spectrum: &data.spectra[i],
                abundance: &data.abundances[i],
            };
            let (b, grads) = pixel_loss_and_grads(model, &sample, target, &cfg.loss_weights, epoch, &mut noise)?;
            sum.recon += b.recon;
            sum.kl_dirichlet += b.kl_dirichlet;
            sum.abundance += b.abundance;
            sum.endmember += b.endmember;
            sum.total += b.total;
            sum.lambda_endmembers_now = b.lambda_endmembers_now;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        acc.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
        adam_step(&mut model.params, &acc, adam, cfg)?;
        noise.clear_log();
    }
    let n = data.len() as f64;
    Ok(LossBreakdown {
        recon: sum.recon / n,
        kl_dirichlet: sum.kl_dirichlet / n,
        abundance: sum.abundance / n,
        endmember: sum.endmember / n,
        total: sum.total / n,
        lambda_endmembers_now: sum.lambda_endmembers_now,
    })
}

/// Model, optimizer and progress as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Ldvae,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = self.model.params.as_map().clone();
        for (k, v) in &self.adam.m {
            t.insert(format!("{M_PREFIX}{k}"), v.clone());
        }
        for (k, v) in &self.adam.v {
            t.insert(format!("{V_PREFIX}{k}"), v.clone());
        }
        t.insert("state.epoch".into(), Tensor::scalar(self.epoch as f64));
        t.insert("state.step".into(), Tensor::scalar(self.adam.step as f64));
        t.insert("state.seed_hi".into(), Tensor::scalar((self.seed >> 32) as f64));
        t.insert("state.seed_lo".into(), Tensor::scalar((self.seed & 0xffff_ffff) as f64));
        write_checkpoint(path, &self.model.config, &t)?;
        Ok(())
    }

    /// Load a training checkpoint, or a parameters-only checkpoint (fresh
    /// optimizer, epoch 0).
    pub fn load(path: &Path) -> Result<Self> {
        let (config, tensors) = read_checkpoint(path)?;
        let mut params = BTreeMap::new();
        let mut adam = AdamState::default();
        let mut scalars = BTreeMap::new();
        for (k, v) in tensors {
            if let Some(n) = k.strip_prefix(M_PREFIX) {
                adam.m.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(V_PREFIX) {
                adam.v.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("state.") {
                scalars.insert(n.to_string(), v.item());
            } else {
                params.insert(k, v);
            }
        }
        let get = |n: &str| scalars.get(n).copied().unwrap_or(0.0);
        adam.step = get("step") as u64;
        let model = Ldvae::from_parts(config, ParamStore::from_map(params))?;
        Ok(Self {
            model,
            adam,
            epoch: get("epoch") as usize,
            seed: ((get("seed_hi") as u64) << 32) | get("seed_lo") as u64,
        })
    }
}

pub const LOG_HEADER: &str = "epoch,recon,kl_dirichlet,abundance,endmember,lambda_em,total";

fn log_row(epoch: usize, b: &LossBreakdown) -> String {
    format!(
        "{epoch},{:e},{:e},{:e},{:e},{:e},{:e}",
        b.recon, b.kl_dirichlet, b.abundance, b.endmember, b.lambda_endmembers_now, b.total
    )
}

/// Paths written by [`fit`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("model.ckpt"),
            log: dir.join("train_log.csv"),
        }
    }
}

/// Result of a training run.
pub struct FitOutcome {
    pub state: TrainState,
    pub split: SplitSpec,
    pub history: Vec<LossBreakdown>,
}

/// Fresh model for `cfg`, with the bundle decoder started from PPI bundles
/// when configured.
pub fn init_state(cfg: &TrainConfig, cube: &HsiCube) -> Result<TrainState> {
    let mut model = Ldvae::new(cfg.model.clone(), cfg.seed)?;
    if cfg.init_from_ppi {
        let mut rng = epoch_rng(cfg.seed, 0, 2 * NOISE_STREAM);
        let scores = ppi_scores(cube, cfg.ppi_skewers, &mut rng)?;
        let est = estimate_bundles(cube, &scores, cfg.model.endmembers, cfg.purity_quantile, cfg.model.seg_len, &mut rng)?;
        info!("initialising bundle decoder from {} PPI-selected pixels", est.selected.len());
        model.init_from_bundles(&est.bundles)?;
    }
    Ok(TrainState {
        model,
        adam: AdamState::default(),
        epoch: 0,
        seed: cfg.seed,
    })
}

fn check_cube(cfg: &TrainConfig, cube: &HsiCube) -> Result<BundleTarget> {
    let bundles = cube
        .gt_bundles
        .as_ref()
        .ok_or(TrainError::MissingGroundTruth("ground-truth bundles"))?;
    if cube.gt_abundances.is_none() {
        return Err(TrainError::MissingGroundTruth("ground-truth abundances"));
    }
    if cube.bands != cfg.model.bands {
        return Err(TrainError::Config {
            field: "model.bands",
            msg: format!("model expects {} bands, cube has {}", cfg.model.bands, cube.bands),
        });
    }
    if cube.endmembers() != Some(cfg.model.endmembers) {
        return Err(TrainError::Config {
            field: "model.endmembers",
            msg: format!("model expects {} endmembers, cube has {:?}", cfg.model.endmembers, cube.endmembers()),
        });
    }
    Ok(BundleTarget::new(bundles)?)
}

fn write_log(path: &Path, rows: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    writeln!(f, "{LOG_HEADER}").map_err(io_err(path))?;
    for r in rows {
        writeln!(f, "{r}").map_err(io_err(path))?;
    }
    Ok(())
}

fn read_log_rows(path: &Path, before: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < before)
        })
        .map(str::to_string)
        .collect()
}

/// Train `cfg.epochs` epochs on the training split of `cube`, writing the
/// checkpoint after every epoch and the per-epoch log. With `resume`, the
/// run continues from that checkpoint's epoch.
pub fn fit(cfg: &TrainConfig, cube: &HsiCube, paths: &RunPaths, resume: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let target = check_cube(cfg, cube)?;
    let split = split_pixels(cube.pixels(), cfg.train_fraction, cfg.seed);
    let data = TrainSet::new(cube, &split.train_indices, cfg.model.patch)?;

    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.model.config != cfg.model {
                return Err(TrainError::Checkpoint("checkpoint model config differs from the requested one".into()));
            }
            if s.seed != cfg.seed {
                warn!("resuming with seed {} from a checkpoint written with seed {}", cfg.seed, s.seed);
            }
            s
        }
        None => init_state(cfg, cube)?,
    };
    state.seed = cfg.seed;
    if let Some(dir) = paths.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut rows = read_log_rows(&paths.log, state.epoch);
    write_log(&paths.log, &rows)?;
    state.save(&paths.checkpoint)?;

    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut model = state.model.clone();
        let mut adam = state.adam.clone();
        let b = match train_epoch(&mut model, &data, &target, &mut adam, epoch, cfg) {
            Ok(b) => b,
            Err(e) => {
                return Err(TrainError::Diverged {
                    epoch,
                    source: Box::new(e),
                })
            }
        };
        state.model = model;
        state.adam = adam;
        state.epoch += 1;
        state.save(&paths.checkpoint)?;
        rows.push(log_row(epoch, &b));
        let mut f = fs::OpenOptions::new().append(true).open(&paths.log).map_err(io_err(&paths.log))?;
        writeln!(f, "{}", rows.last().expect("just pushed")).map_err(io_err(&paths.log))?;
        info!(
            "epoch {epoch}: total {:.6} recon {:.3e} kl {:.4} ab {:.4} em {:.3e}",
            b.total, b.recon, b.kl_dirichlet, b.abundance, b.endmember
        );
        history.push(b);
    }
    Ok(FitOutcome { state, split, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("theta".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_adam_step() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(0.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(1.0), &mut s, &cfg).unwrap();
        let expected = -2e-4 / (1.0 + 1e-8);
        assert!((p.get("theta").unwrap().item() - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(0.7);
        let mut s = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut p, &grad(0.0), &mut s, &cfg).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().item(), 0.7);
    }

    #[test]
    fn quadratic_moves_toward_zero() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(1.0);
        let mut s = AdamState::default();
        let g = 2.0 * p.get("theta").unwrap().item();
        adam_step(&mut p, &grad(g), &mut s, &cfg).unwrap();
        let t = p.get("theta").unwrap().item();
        assert!(t < 1.0 && t > 0.0);
    }

    #[test]
    fn non_finite_gradient_named() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(1.0);
        let mut s = AdamState::default();
        match adam_step(&mut p, &grad(f64::NAN), &mut s, &cfg) {
            Err(TrainError::NonFiniteGradient(n)) => assert_eq!(n, "theta"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::Config { field: "batch_size", .. })));
    }
}
