//! Band-sequential `f32` payloads with JSON sidecars.
//!
//! A cube `<stem>` is stored as `<stem>.bsq` (little-endian `f32`, band
//! planes of `height x width` values, row-major) and `<stem>.json`.
//! Ground-truth abundances use the same layout under `<stem>_abundances`
//! with one band per endmember, and bundles live in `<stem>_bundles.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BundleSet, DataError, HsiCube, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
}

impl CubeHeader {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            dtype: "f32".into(),
            interleave: "bsq".into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json {
        path: path.display().to_string(),
        source,
    }
}

/// `dir/name`, `dir/name.json` and `dir/name.bsq` all name the same cube.
fn stem_of(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bsq") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write pixel-major `values` (`height x width x bands`) as `<stem>.bsq`
/// plus its sidecar.
pub fn write_bsq(stem: &Path, height: usize, width: usize, bands: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width * bands {
        return Err(DataError::DimensionMismatch(format!(
            "{} values for a {height}x{width}x{bands} payload",
            values.len()
        )));
    }
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let px = height * width;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for b in 0..bands {
        for p in 0..px {
            bytes.extend_from_slice(&(values[p * bands + b] as f32).to_le_bytes());
        }
    }
    let bsq = with_suffix(stem, ".bsq");
    fs::write(&bsq, bytes).map_err(io_err(&bsq))?;
    let json = with_suffix(stem, ".json");
    let header = serde_json::to_string_pretty(&CubeHeader::new(height, width, bands)).map_err(json_err(&json))?;
    fs::write(&json, header).map_err(io_err(&json))?;
    Ok(())
}

/// Read `<stem>.json` + `<stem>.bsq`, returning the header and pixel-major
/// values.
pub(crate) fn read_bsq(stem: &Path) -> Result<(CubeHeader, Vec<f64>)> {
    let json = with_suffix(stem, ".json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let header: CubeHeader = serde_json::from_str(&text).map_err(json_err(&json))?;
    if header.dtype != "f32" || header.interleave != "bsq" {
        return Err(DataError::InvalidCube(format!(
            "unsupported dtype/interleave {}/{}",
            header.dtype, header.interleave
        )));
    }
    let bsq = with_suffix(stem, ".bsq");
    let bytes = fs::read(&bsq).map_err(io_err(&bsq))?;
    let (h, w, c) = (header.height, header.width, header.bands);
    let expected = h * w * c * 4;
    if bytes.len() != expected {
        return Err(DataError::DimensionMismatch(format!(
            "header {}x{}x{} implies {expected} bytes, payload {} has {}",
            h,
            w,
            c,
            bsq.display(),
            bytes.len()
        )));
    }
    let px = h * w;
    let mut values = vec![0.0; px * c];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        let (b, p) = (i / px, i % px);
        values[p * c + b] = v;
    }
    Ok((header, values))
}

pub fn load_bundles(path: &Path) -> Result<BundleSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut set: BundleSet = serde_json::from_str(&text).map_err(json_err(path))?;
    set.validate()?;
    // normalise jagged lower-triangle rows to square rows
    for e in &mut set.endmembers {
        for block in &mut e.chol_blocks {
            let n = block.len();
            for row in block.iter_mut() {
                row.resize(n, 0.0);
            }
        }
    }
    Ok(set)
}

pub fn save_bundles(path: &Path, bundles: &BundleSet) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string_pretty(bundles).map_err(json_err(path))?;
    fs::write(path, text).map_err(io_err(path))
}

/// Write a `height x width x K` abundance map as `<stem>.bsq/.json`.
pub fn save_abundances(stem: &Path, height: usize, width: usize, k: usize, abundances: &[f64]) -> Result<()> {
    write_bsq(stem, height, width, k, abundances)
}

/// Load a cube and any ground-truth sidecars next to it.
pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let stem = stem_of(path);
    let (header, values) = read_bsq(&stem)?;
    let mut cube = HsiCube::new(header.height, header.width, header.bands, values)?;

    let ab_stem = with_suffix(&stem, "_abundances");
    if with_suffix(&ab_stem, ".json").exists() {
        let (ah, av) = read_bsq(&ab_stem)?;
        if ah.height != header.height || ah.width != header.width {
            return Err(DataError::DimensionMismatch(format!(
                "abundance map is {}x{}, cube is {}x{}",
                ah.height, ah.width, header.height, header.width
            )));
        }
        cube = cube.with_abundances(av)?;
    }
    let bundles = with_suffix(&stem, "_bundles.json");
    if bundles.exists() {
        cube = cube.with_bundles(load_bundles(&bundles)?)?;
    }
    Ok(cube)
}

/// Save a cube together with whatever ground truth it carries.
pub fn save_cube(stem: &Path, cube: &HsiCube) -> Result<()> {
    let stem = stem_of(stem);
    write_bsq(&stem, cube.height, cube.width, cube.bands, &cube.reflectance)?;
    if let (Some(ab), Some(k)) = (&cube.gt_abundances, cube.endmembers()) {
        save_abundances(&with_suffix(&stem, "_abundances"), cube.height, cube.width, k, ab)?;
    }
    if let Some(b) = &cube.gt_bundles {
        save_bundles(&with_suffix(&stem, "_bundles.json"), b)?;
    }
    Ok(())
}
