//! The LDVAE-T network.
//!
//! Forward pass per pixel: the `P x P` patch around it is cut into spectral
//! segment tokens, projected and given learned positional encodings, run
//! through pre-norm transformer layers and max-pooled into `x_latent`. A
//! softplus head turns `x_latent` into Dirichlet concentrations. The first
//! decoder MLP maps `x_latent` to one Gaussian bundle per endmember (mean
//! plus per-segment Cholesky factors); sampled abundances mix sampled
//! endmembers and the second MLP refines the mixture into `x_hat`.

mod checkpoint;
mod decoder;
mod encoder;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{decode_bundles, reconstruct, sample_abundances, sample_endmembers, PredBundle};
pub use encoder::{alpha_head, encode, tokenize_patch, EncodeOutput};
pub use params::{BoundParams, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{extract_patch, segments, BundleSet, DataError, HsiCube};
use crate::numcore::{NoiseStream, NumError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model config `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatial patch size (odd).
    pub patch: usize,
    pub bands: usize,
    pub endmembers: usize,
    /// Bands per spectral token.
    pub seg_len: usize,
    /// Token / latent width.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Hidden width of the bundle MLP.
    pub decoder_hidden: usize,
    pub eps_alpha: f64,
    pub eps_chol: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 5,
            bands: 48,
            endmembers: 3,
            seg_len: 16,
            d_model: 64,
            layers: 4,
            heads: 16,
            ff_dim: 128,
            decoder_hidden: 64,
            eps_alpha: 1e-6,
            eps_chol: 1e-4,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.d_model
    }

    pub fn segments(&self) -> Vec<(usize, usize)> {
        segments(self.bands, self.seg_len)
    }

    /// Token count `P^2 * ceil(C / seg_len)`.
    pub fn tokens(&self) -> usize {
        self.patch * self.patch * self.bands.div_ceil(self.seg_len)
    }

    /// Lower-triangle entries over all segment blocks of one endmember.
    pub fn chol_entries(&self) -> usize {
        self.segments().iter().map(|&(_, l)| l * (l + 1) / 2).sum()
    }

    /// Output width of the bundle MLP: `K * (C + chol_entries)`.
    pub fn bundle_dim(&self) -> usize {
        self.endmembers * (self.bands + self.chol_entries())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: String| Err(ModelError::Config { field, msg });
        if self.patch == 0 || self.patch % 2 == 0 {
            return bad("patch", format!("must be odd, got {}", self.patch));
        }
        if self.bands == 0 || self.seg_len == 0 {
            return bad("seg_len", "bands and seg_len must be positive".into());
        }
        if self.endmembers < 2 {
            return bad("endmembers", format!("need at least 2, got {}", self.endmembers));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad("d_model", format!("{} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.layers == 0 {
            return bad("layers", "need at least one layer".into());
        }
        if self.ff_dim == 0 || self.decoder_hidden == 0 {
            return bad("ff_dim", "hidden widths must be positive".into());
        }
        if !(self.eps_alpha > 0.0) || !(self.eps_chol > 0.0) || !(self.ln_eps > 0.0) {
            return bad("eps_alpha", "epsilons must be positive".into());
        }
        Ok(())
    }
}

/// Whether the forward pass samples (training) or uses the distribution
/// means (evaluation / inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Sample,
    Mean,
}

/// Tape handles for one pixel's forward pass.
pub struct ForwardVars<'t> {
    pub x_latent: Var<'t>,
    pub alpha: Var<'t>,
    pub z: Var<'t>,
    pub bundles: Vec<PredBundle<'t>>,
    pub endmembers: Var<'t>,
    pub x_recon: Var<'t>,
}

/// Plain-value snapshot of one pixel's latent quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentOutput {
    pub x_latent: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
    /// `K` rows of `C` values.
    pub sampled_endmembers: Vec<Vec<f64>>,
    pub x_recon: Vec<f64>,
}

/// Model configuration plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Ldvae {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Ldvae {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = params::init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = params::init_params(&config, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::MissingParam(name.clone())),
            }
        }
        Ok(Self { config, params })
    }

    /// Point the bundle MLP's output bias at `bundles` (means and Cholesky
    /// factors) and shrink its output weights, so the decoder starts from
    /// the given endmember distributions.
    pub fn init_from_bundles(&mut self, bundles: &BundleSet) -> Result<()> {
        params::init_decoder_from_bundles(&self.config, &mut self.params, bundles)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.params.bind(tape)
    }

    /// Full forward pass for one patch.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        patch: &Tensor,
        noise: &mut NoiseStream,
        mode: Sampling,
    ) -> Result<ForwardVars<'t>> {
        let cfg = &self.config;
        let tokens = tokenize_patch(tape, bound, patch, cfg)?;
        let enc = encode(tokens, bound, cfg)?;
        let alpha = alpha_head(enc.x_latent, bound, cfg)?;
        let bundles = decode_bundles(enc.x_latent, bound, cfg)?;
        let (z, endmembers) = match mode {
            Sampling::Sample => (sample_abundances(alpha, noise)?, sample_endmembers(&bundles, noise)?),
            Sampling::Mean => {
                let z = alpha.div(alpha.sum())?;
                let means: Vec<Var<'t>> = bundles.iter().map(|b| b.mean.reshape(&[1, cfg.bands])).collect::<std::result::Result<_, _>>()?;
                (z, Var::concat(&means, 0)?)
            }
        };
        let x_recon = reconstruct(z, endmembers, bound, cfg)?;
        Ok(ForwardVars {
            x_latent: enc.x_latent,
            alpha,
            z,
            bundles,
            endmembers,
            x_recon,
        })
    }

    /// Value-only forward pass.
    pub fn latent(&self, patch: &Tensor, noise: &mut NoiseStream, mode: Sampling) -> Result<LatentOutput> {
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let f = self.forward(&tape, &bound, patch, noise, mode)?;
        let c = self.config.bands;
        Ok(LatentOutput {
            x_latent: f.x_latent.data(),
            alpha_hat: f.alpha.data(),
            z_hat: f.z.data(),
            sampled_endmembers: f.endmembers.data().chunks(c).map(|r| r.to_vec()).collect(),
            x_recon: f.x_recon.data(),
        })
    }

    /// Deterministic inference for pixel `p` of `cube`: Dirichlet-mean
    /// abundances and the bundle means.
    pub fn infer_pixel(&self, cube: &HsiCube, p: usize) -> Result<PixelPrediction> {
        let patch = extract_patch(cube, p / cube.width, p % cube.width, self.config.patch)?;
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let cfg = &self.config;
        let tokens = tokenize_patch(&tape, &bound, &patch, cfg)?;
        let enc = encode(tokens, &bound, cfg)?;
        let alpha = alpha_head(enc.x_latent, &bound, cfg)?;
        let bundles = decode_bundles(enc.x_latent, &bound, cfg)?;
        let alpha_v = alpha.data();
        let total: f64 = alpha_v.iter().sum();
        Ok(PixelPrediction {
            abundances: alpha_v.iter().map(|a| a / total).collect(),
            alpha: alpha_v,
            means: bundles.iter().map(|b| b.mean.data()).collect(),
            cov_blocks: bundles
                .iter()
                .map(|b| b.chol.iter().map(|l| l.value()).collect())
                .collect(),
        })
    }
}

/// Deterministic per-pixel outputs used for evaluation and unmixing.
#[derive(Clone, Debug)]
pub struct PixelPrediction {
    pub alpha: Vec<f64>,
    /// Dirichlet mean `alpha / sum(alpha)`.
    pub abundances: Vec<f64>,
    /// `K` predicted bundle means.
    pub means: Vec<Vec<f64>>,
    /// Per endmember, per segment: Cholesky factor as a square tensor.
    pub cov_blocks: Vec<Vec<Tensor>>,
}
