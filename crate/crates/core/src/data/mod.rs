//! Hyperspectral cubes, endmember bundles and everything that produces them.

mod bundles;
mod io;
mod patch;
mod ppi;
mod split;
mod synth;

pub use bundles::{estimate_bundles, BundleEstimate, DEFAULT_PURITY_QUANTILE};
pub use io::{load_bundles, load_cube, save_abundances, save_bundles, save_cube, write_bsq, CubeHeader};
pub use patch::extract_patch;
pub use ppi::{ppi_scores, ppi_scores_with_skewers, random_skewers, DEFAULT_SKEWERS};
pub use split::{split_pixels, SplitSpec, DEFAULT_TRAIN_FRACTION};
pub use synth::{default_mean_shapes, synth_scene, SceneConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::linalg;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid cube: {0}")]
    InvalidCube(String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: &'static str, msg: String },
    #[error("patch size must be odd, got {0}")]
    EvenPatch(usize),
    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("too few pure pixels: need {needed}, selected {selected}")]
    TooFewPurePixels { needed: usize, selected: usize },
    #[error("cannot form {k} clusters from {distinct} distinct spectra")]
    DegenerateClusters { k: usize, distinct: usize },
    #[error("empty cube")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// `(start, len)` of each fixed-length spectral segment; the last segment
/// is truncated when `bands` is not a multiple of `seg_len`.
pub fn segments(bands: usize, seg_len: usize) -> Vec<(usize, usize)> {
    (0..bands.div_ceil(seg_len))
        .map(|s| {
            let start = s * seg_len;
            (start, seg_len.min(bands - start))
        })
        .collect()
}

/// Gaussian bundle of one endmember: mean spectrum and block-diagonal
/// covariance stored as one lower Cholesky factor per spectral segment.
/// Each block is a list of square rows (entries above the diagonal are 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndmemberBundle {
    pub name: String,
    pub mean: Vec<f64>,
    pub chol_blocks: Vec<Vec<Vec<f64>>>,
}

impl EndmemberBundle {
    /// Block `s` as a flat row-major `len x len` matrix.
    pub fn block_flat(&self, s: usize) -> Vec<f64> {
        let rows = &self.chol_blocks[s];
        let n = rows.len();
        let mut out = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate().take(i + 1) {
                out[i * n + j] = v;
            }
        }
        out
    }

    /// Covariance block `s` as `L L^T`.
    pub fn cov_block(&self, s: usize) -> Vec<f64> {
        linalg::outer_lower(&self.block_flat(s), self.chol_blocks[s].len())
    }
}

/// The set of endmember bundles of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSet {
    pub seg_len: usize,
    pub endmembers: Vec<EndmemberBundle>,
}

impl BundleSet {
    pub fn len(&self) -> usize {
        self.endmembers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endmembers.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.endmembers.first().map_or(0, |e| e.mean.len())
    }

    /// Mean spectra as a `K x C` row-major matrix.
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.endmembers.iter().map(|e| e.mean.clone()).collect()
    }

    /// Structural checks plus strictly positive Cholesky diagonals.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for e in &self.endmembers {
            for (s, block) in e.chol_blocks.iter().enumerate() {
                for (i, row) in block.iter().enumerate() {
                    if !(row[i] > 0.0) {
                        return Err(DataError::InvalidBundle(format!(
                            "{}: block {s} diagonal {i} is {} (must be > 0)",
                            e.name, row[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Shape checks only; zero-variance blocks pass.
    pub fn validate_structure(&self) -> Result<()> {
        if self.seg_len == 0 {
            return Err(DataError::InvalidBundle("seg_len must be positive".into()));
        }
        let bands = self.bands();
        let segs = segments(bands, self.seg_len);
        for e in &self.endmembers {
            if e.mean.len() != bands {
                return Err(DataError::InvalidBundle(format!(
                    "{}: mean has {} bands, expected {bands}",
                    e.name,
                    e.mean.len()
                )));
            }
            if let Some(i) = e.mean.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(i));
            }
            if e.chol_blocks.len() != segs.len() {
                return Err(DataError::InvalidBundle(format!(
                    "{}: {} blocks, expected {}",
                    e.name,
                    e.chol_blocks.len(),
                    segs.len()
                )));
            }
            for (block, &(_, len)) in e.chol_blocks.iter().zip(&segs) {
                if block.len() != len {
                    return Err(DataError::InvalidBundle(format!(
                        "{}: block has {} rows, expected {len}",
                        e.name,
                        block.len()
                    )));
                }
                for (i, row) in block.iter().enumerate() {
                    // square rows or the lower triangle only
                    if row.len() != len && row.len() != i + 1 {
                        return Err(DataError::InvalidBundle(format!(
                            "{}: block row {i} has {} entries",
                            e.name,
                            row.len()
                        )));
                    }
                    if row.iter().skip(i + 1).any(|&v| v != 0.0) {
                        return Err(DataError::InvalidBundle(format!(
                            "{}: block row {i} is not lower-triangular",
                            e.name
                        )));
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(DataError::InvalidBundle(format!("{}: non-finite factor", e.name)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// An `H x W x C` reflectance cube (pixel-major, bands fastest) with
/// optional per-pixel ground-truth abundances (`H x W x K`) and bundles.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub reflectance: Vec<f64>,
    pub gt_abundances: Option<Vec<f64>>,
    pub gt_bundles: Option<BundleSet>,
}

/// Slack allowed on the sum-to-one check of ground-truth abundances.
pub const SIMPLEX_TOL: f64 = 1e-6;

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, reflectance: Vec<f64>) -> Result<Self> {
        let cube = Self {
            height,
            width,
            bands,
            reflectance,
            gt_abundances: None,
            gt_bundles: None,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Spectrum of flat pixel index `p = row * width + col`.
    pub fn spectrum(&self, p: usize) -> &[f64] {
        &self.reflectance[p * self.bands..(p + 1) * self.bands]
    }

    /// Number of endmembers in the ground truth, if any.
    pub fn endmembers(&self) -> Option<usize> {
        if let Some(b) = &self.gt_bundles {
            return Some(b.len());
        }
        self.gt_abundances.as_ref().map(|a| a.len() / self.pixels().max(1))
    }

    pub fn abundance(&self, p: usize) -> Option<&[f64]> {
        let k = self.endmembers()?;
        self.gt_abundances.as_ref().map(|a| &a[p * k..(p + 1) * k])
    }

    pub fn with_abundances(mut self, abundances: Vec<f64>) -> Result<Self> {
        self.gt_abundances = Some(abundances);
        self.validate()?;
        Ok(self)
    }

    pub fn with_bundles(mut self, bundles: BundleSet) -> Result<Self> {
        self.gt_bundles = Some(bundles);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width * self.bands;
        if self.reflectance.len() != n {
            return Err(DataError::DimensionMismatch(format!(
                "{}x{}x{} cube needs {n} values, got {}",
                self.height,
                self.width,
                self.bands,
                self.reflectance.len()
            )));
        }
        for (i, &v) in self.reflectance.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFinite(i));
            }
            if v < 0.0 {
                return Err(DataError::InvalidCube(format!("negative reflectance {v} at flat index {i}")));
            }
        }
        if let Some(b) = &self.gt_bundles {
            b.validate_structure()?;
            if b.bands() != self.bands {
                return Err(DataError::DimensionMismatch(format!(
                    "bundles have {} bands, cube has {}",
                    b.bands(),
                    self.bands
                )));
            }
        }
        if let Some(a) = &self.gt_abundances {
            let px = self.pixels();
            if px == 0 || a.len() % px != 0 {
                return Err(DataError::DimensionMismatch(format!(
                    "{} abundance values for {px} pixels",
                    a.len()
                )));
            }
            let k = a.len() / px;
            if let Some(b) = &self.gt_bundles {
                if b.len() != k {
                    return Err(DataError::DimensionMismatch(format!(
                        "{k} abundance maps but {} bundles",
                        b.len()
                    )));
                }
            }
            for (p, z) in a.chunks(k).enumerate() {
                if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                    return Err(DataError::NonFinite(p * k + i));
                }
                let s: f64 = z.iter().sum();
                if z.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > SIMPLEX_TOL {
                    return Err(DataError::InvalidCube(format!(
                        "abundance of pixel {p} is off the simplex (sum {s})"
                    )));
                }
            }
        }
        Ok(())
    }
}
