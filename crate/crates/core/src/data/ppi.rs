//! Pixel Purity Index.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, HsiCube, Result};

pub const DEFAULT_SKEWERS: usize = 10_000;

/// `n` random unit directions in `bands` dimensions.
pub fn random_skewers<R: Rng>(bands: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..bands).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Count, per pixel, how often it is the extreme (min or max) projection
/// over random skewers.
pub fn ppi_scores<R: Rng>(cube: &HsiCube, n_skewers: usize, rng: &mut R) -> Result<Vec<u64>> {
    if n_skewers == 0 {
        return Err(DataError::InvalidConfig {
            field: "n_skewers",
            msg: "must be at least 1".into(),
        });
    }
    let skewers = random_skewers(cube.bands, n_skewers, rng);
    ppi_scores_with_skewers(cube, &skewers)
}

/// PPI over a fixed skewer set. Every skewer adds exactly two counts; ties
/// go to the lowest pixel index.
pub fn ppi_scores_with_skewers(cube: &HsiCube, skewers: &[Vec<f64>]) -> Result<Vec<u64>> {
    let n = cube.pixels();
    if n == 0 || cube.bands == 0 {
        return Err(DataError::Empty);
    }
    let mut counts = vec![0u64; n];
    for s in skewers {
        if s.len() != cube.bands {
            return Err(DataError::DimensionMismatch(format!(
                "skewer has {} bands, cube has {}",
                s.len(),
                cube.bands
            )));
        }
        let (mut lo, mut hi) = (0usize, 0usize);
        let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in 0..n {
            let v: f64 = cube.spectrum(p).iter().zip(s).map(|(a, b)| a * b).sum();
            if v < lo_v {
                lo_v = v;
                lo = p;
            }
            if v > hi_v {
                hi_v = v;
                hi = p;
            }
        }
        counts[lo] += 1;
        counts[hi] += 1;
    }
    Ok(counts)
}
