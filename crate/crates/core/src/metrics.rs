//! Spectral angle, abundance RMSE, endmember matching and result tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::HsiCube;
use crate::model::{Ldvae, ModelError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{op}: length {lhs} vs {rhs}")]
    LengthMismatch { op: &'static str, lhs: usize, rhs: usize },
    #[error("spectral angle of a zero vector")]
    ZeroVector,
    #[error("{0}")]
    MissingGroundTruth(&'static str),
    #[error("no pixels to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Spectral angle in radians, `acos` of the clamped cosine similarity.
pub fn sad(e_hat: &[f64], e: &[f64]) -> Result<f64> {
    if e_hat.len() != e.len() {
        return Err(MetricError::LengthMismatch {
            op: "sad",
            lhs: e_hat.len(),
            rhs: e.len(),
        });
    }
    let dot: f64 = e_hat.iter().zip(e).map(|(a, b)| a * b).sum();
    let na = e_hat.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = e.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0).acos())
}

fn check_maps(z_hat: &[f64], z_gt: &[f64], k: usize) -> Result<usize> {
    if z_hat.len() != z_gt.len() || k == 0 || z_hat.len() % k != 0 {
        return Err(MetricError::LengthMismatch {
            op: "rmse_abundance",
            lhs: z_hat.len(),
            rhs: z_gt.len(),
        });
    }
    match z_hat.len() / k {
        0 => Err(MetricError::Empty),
        n => Ok(n),
    }
}

/// `sqrt(1/N sum_n ||z_hat_n - z_n||^2)` over `N x K` row-major maps.
pub fn rmse_abundance(z_hat: &[f64], z_gt: &[f64], k: usize) -> Result<f64> {
    let n = check_maps(z_hat, z_gt, k)?;
    let ss: f64 = z_hat.iter().zip(z_gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / n as f64).sqrt())
}

/// `sqrt(1/N sum_n (z_hat_nk - z_nk)^2)` for each column `k`.
pub fn rmse_per_endmember(z_hat: &[f64], z_gt: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = check_maps(z_hat, z_gt, k)?;
    let mut ss = vec![0.0; k];
    for (row_h, row_g) in z_hat.chunks(k).zip(z_gt.chunks(k)) {
        for j in 0..k {
            let d = row_h[j] - row_g[j];
            ss[j] += d * d;
        }
    }
    Ok(ss.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}

/// Minimum-cost assignment on a square cost matrix (Hungarian method with
/// potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Assignment `pred index -> gt index` minimising total SAD.
pub fn match_endmembers(pred_means: &[Vec<f64>], gt_means: &[Vec<f64>]) -> Result<Vec<usize>> {
    if pred_means.len() != gt_means.len() {
        return Err(MetricError::LengthMismatch {
            op: "match_endmembers",
            lhs: pred_means.len(),
            rhs: gt_means.len(),
        });
    }
    let cost = pred_means
        .iter()
        .map(|p| gt_means.iter().map(|g| sad(p, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(hungarian(&cost))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Ground-truth endmember names, one row each.
    pub names: Vec<String>,
    /// Indexed by ground-truth endmember.
    pub per_endmember_sad: Vec<f64>,
    pub per_endmember_rmse: Vec<f64>,
    pub avg_sad: f64,
    pub avg_rmse: f64,
    /// Vector-norm RMSE over all endmembers.
    pub overall_rmse: f64,
    /// `assignment[pred] = gt`.
    pub assignment: Vec<usize>,
}

impl EvalReport {
    /// Match predicted means to ground truth and score both tasks.
    ///
    /// `pred_abundances` and `gt_abundances` are `N x K` row-major maps over
    /// the same pixels.
    pub fn compute(
        names: Vec<String>,
        pred_means: &[Vec<f64>],
        gt_means: &[Vec<f64>],
        pred_abundances: &[f64],
        gt_abundances: &[f64],
    ) -> Result<Self> {
        let k = gt_means.len();
        if names.len() != k {
            return Err(MetricError::LengthMismatch {
                op: "evaluate",
                lhs: names.len(),
                rhs: k,
            });
        }
        let assignment = match_endmembers(pred_means, gt_means)?;
        let mut per_endmember_sad = vec![0.0; k];
        for (p, &g) in assignment.iter().enumerate() {
            per_endmember_sad[g] = sad(&pred_means[p], &gt_means[g])?;
        }
        // reorder predicted abundance columns into ground-truth order
        check_maps(pred_abundances, gt_abundances, k)?;
        let mut aligned = vec![0.0; pred_abundances.len()];
        for (src, dst) in pred_abundances.chunks(k).zip(aligned.chunks_mut(k)) {
            for (p, &g) in assignment.iter().enumerate() {
                dst[g] = src[p];
            }
        }
        let per_endmember_rmse = rmse_per_endmember(&aligned, gt_abundances, k)?;
        let overall_rmse = rmse_abundance(&aligned, gt_abundances, k)?;
        Ok(Self {
            names,
            avg_sad: per_endmember_sad.iter().sum::<f64>() / k as f64,
            avg_rmse: per_endmember_rmse.iter().sum::<f64>() / k as f64,
            per_endmember_sad,
            per_endmember_rmse,
            overall_rmse,
            assignment,
        })
    }

    /// `endmember,sad_rad,rmse` rows plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("endmember,sad_rad,rmse\n");
        for (i, name) in self.names.iter().enumerate() {
            let _ = writeln!(s, "{name},{:e},{:e}", self.per_endmember_sad[i], self.per_endmember_rmse[i]);
        }
        let _ = writeln!(s, "average,{:e},{:e}", self.avg_sad, self.avg_rmse);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| MetricError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Deterministic model outputs over a set of pixels.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub pixels: Vec<usize>,
    /// `N x K` Dirichlet-mean abundances.
    pub abundances: Vec<f64>,
    /// Predicted bundle means averaged over the pixels, `K x C`.
    pub mean_spectra: Vec<Vec<f64>>,
}

/// Run the model over `pixels` of `cube`.
pub fn predict(model: &Ldvae, cube: &HsiCube, pixels: &[usize]) -> Result<Predictions> {
    if pixels.is_empty() {
        return Err(MetricError::Empty);
    }
    let (k, c) = (model.config.endmembers, model.config.bands);
    let mut abundances = Vec::with_capacity(pixels.len() * k);
    let mut sums = vec![vec![0.0; c]; k];
    for &p in pixels {
        let pred = model.infer_pixel(cube, p)?;
        abundances.extend_from_slice(&pred.abundances);
        for (acc, m) in sums.iter_mut().zip(&pred.means) {
            acc.iter_mut().zip(m).for_each(|(a, v)| *a += v);
        }
    }
    let n = pixels.len() as f64;
    sums.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= n));
    Ok(Predictions {
        pixels: pixels.to_vec(),
        abundances,
        mean_spectra: sums,
    })
}

/// Score the model on `pixels` of a cube carrying ground truth.
pub fn evaluate(model: &Ldvae, cube: &HsiCube, pixels: &[usize]) -> Result<(EvalReport, Predictions)> {
    let gt_bundles = cube
        .gt_bundles
        .as_ref()
        .ok_or(MetricError::MissingGroundTruth("cube has no ground-truth bundles"))?;
    if cube.gt_abundances.is_none() {
        return Err(MetricError::MissingGroundTruth("cube has no ground-truth abundances"));
    }
    let preds = predict(model, cube, pixels)?;
    let gt_ab: Vec<f64> = pixels
        .iter()
        .flat_map(|&p| cube.abundance(p).expect("abundances present").to_vec())
        .collect();
    let names = gt_bundles.endmembers.iter().map(|e| e.name.clone()).collect();
    let report = EvalReport::compute(names, &preds.mean_spectra, &gt_bundles.means(), &preds.abundances, &gt_ab)?;
    Ok((report, preds))
}
