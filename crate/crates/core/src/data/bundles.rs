//! Endmember bundle estimation from PPI-selected pure pixels.

use log::warn;
use rand::Rng;

use super::{segments, BundleSet, DataError, EndmemberBundle, HsiCube, Result};
use crate::numcore::linalg;

/// Score quantile (over nonzero-PPI pixels) above which a pixel counts as
/// pure.
pub const DEFAULT_PURITY_QUANTILE: f64 = 0.95;
const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 100;
/// Ridge added to covariance block diagonals, relative to the mean band
/// variance of the cube.
const RIDGE_REL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BundleEstimate {
    pub bundles: BundleSet,
    /// Flat pixel indices used as pure pixels.
    pub selected: Vec<usize>,
    /// Cluster label of each selected pixel.
    pub labels: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> (Vec<usize>, f64) {
    let n = points.len();
    let dim = points[0].len();
    // k-means++ seeding
    let mut centres: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centres.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centres.last().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centres[a]).total_cmp(&sq_dist(p, &centres[b])))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centre
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points[a], &centres[labels[a]]).total_cmp(&sq_dist(points[b], &centres[labels[b]]))
                    })
                    .unwrap();
                centres[c] = points[far].to_vec();
                labels[far] = c;
                changed = true;
            } else {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centres[l])).sum();
    (labels, inertia)
}

/// Seeded k-means with k-means++ starts; best of several restarts by
/// inertia.
pub(crate) fn kmeans<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<usize> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (labels, inertia) = kmeans_once(points, k, rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    best.map(|(l, _)| l).unwrap_or_default()
}

fn mean_band_variance(cube: &HsiCube) -> f64 {
    let n = cube.pixels() as f64;
    let c = cube.bands;
    let mut total = 0.0;
    for b in 0..c {
        let m = (0..cube.pixels()).map(|p| cube.spectrum(p)[b]).sum::<f64>() / n;
        total += (0..cube.pixels()).map(|p| (cube.spectrum(p)[b] - m).powi(2)).sum::<f64>() / n;
    }
    total / c as f64
}

/// Select the purest pixels by PPI count, cluster them into `k` groups and
/// fit one Gaussian bundle (mean + per-segment Cholesky factor) per group.
///
/// The selection is every nonzero-count pixel at or above the
/// `purity_quantile` of nonzero counts, extended down the ranking to at
/// least `k * (seg_len + 1)` pixels.
pub fn estimate_bundles<R: Rng>(
    cube: &HsiCube,
    scores: &[u64],
    k: usize,
    purity_quantile: f64,
    seg_len: usize,
    rng: &mut R,
) -> Result<BundleEstimate> {
    if scores.len() != cube.pixels() {
        return Err(DataError::DimensionMismatch(format!(
            "{} PPI scores for {} pixels",
            scores.len(),
            cube.pixels()
        )));
    }
    if k < 1 || seg_len == 0 || !(0.0..=1.0).contains(&purity_quantile) {
        return Err(DataError::InvalidConfig {
            field: "purity_quantile",
            msg: format!("need k >= 1, seg_len >= 1 and quantile in [0, 1]; got {k}, {seg_len}, {purity_quantile}"),
        });
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&p| scores[p] > 0).collect();
    candidates.sort_by_key(|&p| (std::cmp::Reverse(scores[p]), p));
    // pixels above the score quantile, topped up by rank so every cluster
    // can support a full-rank segment covariance
    let needed = k * (seg_len + 1);
    let above = ((1.0 - purity_quantile) * candidates.len() as f64).ceil() as usize;
    let keep = above.max(needed).min(candidates.len());
    let selected: Vec<usize> = candidates[..keep].to_vec();

    let mut distinct: Vec<&[f64]> = selected.iter().map(|&p| cube.spectrum(p)).collect();
    distinct.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if !selected.is_empty() && distinct.len() < k {
        return Err(DataError::DegenerateClusters {
            k,
            distinct: distinct.len(),
        });
    }
    if selected.len() < needed {
        return Err(DataError::TooFewPurePixels {
            needed,
            selected: selected.len(),
        });
    }

    let points: Vec<&[f64]> = selected.iter().map(|&p| cube.spectrum(p)).collect();
    let labels = kmeans(&points, k, rng);
    let ridge = (RIDGE_REL * mean_band_variance(cube)).max(1e-12);
    let segs = segments(cube.bands, seg_len);

    let mut endmembers = Vec::with_capacity(k);
    for cluster in 0..k {
        let members: Vec<&[f64]> = points
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == cluster)
            .map(|(p, _)| *p)
            .collect();
        let m = members.len();
        let mean: Vec<f64> = (0..cube.bands)
            .map(|b| members.iter().map(|p| p[b]).sum::<f64>() / m.max(1) as f64)
            .collect();
        if m < 2 {
            warn!("cluster {cluster} has {m} member(s); using ridge-only covariance");
        }
        let mut chol_blocks = Vec::with_capacity(segs.len());
        for &(start, len) in &segs {
            let mut cov = vec![0.0; len * len];
            if m >= 2 {
                for p in &members {
                    for i in 0..len {
                        let di = p[start + i] - mean[start + i];
                        for j in 0..=i {
                            cov[i * len + j] += di * (p[start + j] - mean[start + j]);
                        }
                    }
                }
                for i in 0..len {
                    for j in 0..=i {
                        let v = cov[i * len + j] / (m - 1) as f64;
                        cov[i * len + j] = v;
                        cov[j * len + i] = v;
                    }
                }
            }
            for i in 0..len {
                cov[i * len + i] += ridge;
            }
            let l = linalg::cholesky(&cov, len).ok_or_else(|| {
                DataError::InvalidBundle(format!("cluster {cluster}: covariance block at band {start} not positive definite"))
            })?;
            chol_blocks.push(l.chunks(len).map(|r| r.to_vec()).collect());
        }
        endmembers.push(EndmemberBundle {
            name: format!("em{cluster}"),
            mean,
            chol_blocks,
        });
    }
    let bundles = BundleSet { seg_len, endmembers };
    bundles.validate()?;
    Ok(BundleEstimate {
        bundles,
        selected,
        labels,
    })
}
