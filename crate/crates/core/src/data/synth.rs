//! Synthetic linear-mixing scenes with Gaussian endmember bundles.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{segments, BundleSet, DataError, EndmemberBundle, HsiCube, Result};
use crate::numcore::linalg;

/// Concentration given to the dominant endmember of a "pure" pixel.
const PURE_BOOST: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmembers: usize,
    /// Dirichlet concentrations for abundance generation, one per endmember.
    pub dirichlet_alpha: Vec<f64>,
    pub seg_len: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise_sigma: f64,
    /// Fraction of pixels redrawn with one concentration boosted to 50.
    pub pure_pixel_fraction: f64,
    /// Per-endmember standard deviation of the spectral variability.
    pub variability: Vec<f64>,
    /// Band correlation length inside a segment (`exp(-|i-j| / len)`).
    pub correlation_length: f64,
    /// Explicit mean spectra; built-in shapes are used when absent.
    pub mean_shapes: Option<Vec<Vec<f64>>>,
    pub names: Option<Vec<String>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            bands: 48,
            endmembers: 3,
            dirichlet_alpha: vec![1.0; 3],
            seg_len: 16,
            noise_sigma: 0.005,
            pure_pixel_fraction: 0.1,
            variability: vec![0.01; 3],
            correlation_length: 4.0,
            mean_shapes: None,
            names: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: String| Err(DataError::InvalidConfig { field, msg });
        let k = self.endmembers;
        if k < 2 {
            return bad("endmembers", format!("need at least 2, got {k}"));
        }
        if self.height == 0 || self.width == 0 {
            return bad("height", "image must be non-empty".into());
        }
        if self.seg_len == 0 || self.bands < self.seg_len {
            return bad("seg_len", format!("need 1 <= seg_len <= bands ({}), got {}", self.bands, self.seg_len));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.pure_pixel_fraction) {
            return bad("pure_pixel_fraction", format!("must lie in [0, 1], got {}", self.pure_pixel_fraction));
        }
        if self.dirichlet_alpha.len() != k || self.dirichlet_alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return bad("dirichlet_alpha", format!("need {k} positive values, got {:?}", self.dirichlet_alpha));
        }
        if self.variability.len() != k || self.variability.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return bad("variability", format!("need {k} values >= 0, got {:?}", self.variability));
        }
        if !(self.correlation_length > 0.0) {
            return bad("correlation_length", format!("must be > 0, got {}", self.correlation_length));
        }
        if let Some(m) = &self.mean_shapes {
            if m.len() != k || m.iter().any(|s| s.len() != self.bands || s.iter().any(|&v| !(v >= 0.0))) {
                return bad("mean_shapes", format!("need {k} nonnegative spectra of {} bands", self.bands));
            }
        }
        if let Some(n) = &self.names {
            if n.len() != k {
                return bad("names", format!("need {k} names, got {}", n.len()));
            }
        }
        Ok(())
    }

    /// Ground-truth bundles implied by the config.
    pub fn bundles(&self) -> Result<BundleSet> {
        self.validate()?;
        let means = self
            .mean_shapes
            .clone()
            .unwrap_or_else(|| default_mean_shapes(self.endmembers, self.bands));
        let segs = segments(self.bands, self.seg_len);
        let endmembers = means
            .into_iter()
            .enumerate()
            .map(|(k, mean)| {
                let sd = self.variability[k];
                let chol_blocks = segs
                    .iter()
                    .map(|&(_, len)| {
                        let l = if sd > 0.0 {
                            let mut cov = vec![0.0; len * len];
                            for i in 0..len {
                                for j in 0..len {
                                    let d = (i as f64 - j as f64).abs();
                                    cov[i * len + j] = sd * sd * (-d / self.correlation_length).exp();
                                }
                            }
                            linalg::cholesky(&cov, len).expect("exponential kernel is positive definite")
                        } else {
                            vec![0.0; len * len]
                        };
                        l.chunks(len).map(|r| r.to_vec()).collect()
                    })
                    .collect();
                let name = self
                    .names
                    .as_ref()
                    .map_or_else(|| format!("em{k}"), |n| n[k].clone());
                EndmemberBundle { name, mean, chol_blocks }
            })
            .collect();
        Ok(BundleSet {
            seg_len: self.seg_len,
            endmembers,
        })
    }
}

/// Smooth, mutually distinct reflectance curves: a Gaussian absorption-like
/// bump at a per-endmember position on top of a sloped baseline.
pub fn default_mean_shapes(k: usize, bands: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|e| {
            let centre = (e as f64 + 0.5) / k as f64;
            (0..bands)
                .map(|b| {
                    let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
                    let slope = if e % 2 == 0 { t } else { 1.0 - t };
                    0.15 + 0.55 * (-((t - centre) / 0.18).powi(2)).exp() + 0.15 * slope
                })
                .collect()
        })
        .collect()
}

fn dirichlet<R: Rng>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Draw a scene under the linear mixing model `x = sum_k z_k e_k + n` with
/// per-pixel endmember realisations `e_k ~ N(mu_k, Sigma_k)`; negative
/// reflectances are clamped to zero.
pub fn synth_scene<R: Rng>(config: &SceneConfig, rng: &mut R) -> Result<HsiCube> {
    let bundles = config.bundles()?;
    let (k, c) = (config.endmembers, config.bands);
    let n = config.height * config.width;

    let mut abundances = Vec::with_capacity(n * k);
    for _ in 0..n {
        abundances.extend(dirichlet(&config.dirichlet_alpha, rng));
    }
    let n_pure = (config.pure_pixel_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for (i, &p) in order[..n_pure].iter().enumerate() {
        let mut alpha = config.dirichlet_alpha.clone();
        alpha[i % k] = PURE_BOOST;
        abundances[p * k..(p + 1) * k].copy_from_slice(&dirichlet(&alpha, rng));
    }

    let segs = segments(c, config.seg_len);
    let blocks: Vec<Vec<Vec<f64>>> = bundles
        .endmembers
        .iter()
        .map(|e| (0..segs.len()).map(|s| e.block_flat(s)).collect())
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| DataError::InvalidConfig {
        field: "noise_sigma",
        msg: e.to_string(),
    })?;
    let mut reflectance = vec![0.0; n * c];
    let mut e = vec![0.0; c];
    let mut z = vec![0.0; c];
    for p in 0..n {
        let px = &mut reflectance[p * c..(p + 1) * c];
        for (kk, bundle) in bundles.endmembers.iter().enumerate() {
            e.copy_from_slice(&bundle.mean);
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for (s, &(start, len)) in segs.iter().enumerate() {
                let l = &blocks[kk][s];
                for i in 0..len {
                    e[start + i] += (0..=i).map(|j| l[i * len + j] * z[start + j]).sum::<f64>();
                }
            }
            let w = abundances[p * k + kk];
            for (x, ev) in px.iter_mut().zip(&e) {
                *x += w * ev;
            }
        }
        for x in px.iter_mut() {
            *x = (*x + noise.sample(rng)).max(0.0);
        }
    }

    HsiCube::new(config.height, config.width, c, reflectance)?
        .with_abundances(abundances)?
        .with_bundles(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet(k: usize) -> SceneConfig {
        SceneConfig {
            height: 8,
            width: 8,
            bands: 16,
            endmembers: k,
            dirichlet_alpha: vec![1.0; k],
            seg_len: 8,
            noise_sigma: 0.0,
            pure_pixel_fraction: 0.0,
            variability: vec![0.0; k],
            ..SceneConfig::default()
        }
    }

    #[test]
    fn pure_pixel_without_noise_equals_mean() {
        let cfg = quiet(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cube = synth_scene(&cfg, &mut rng).unwrap();
        // rebuild pixel 0 from a one-hot abundance by hand
        let mu = cube.gt_bundles.as_ref().unwrap().endmembers[0].mean.clone();
        cube.gt_abundances.as_mut().unwrap()[..2].copy_from_slice(&[1.0, 0.0]);
        let recon: Vec<f64> = (0..cfg.bands)
            .map(|b| {
                (0..2)
                    .map(|kk| cube.abundance(0).unwrap()[kk] * cube.gt_bundles.as_ref().unwrap().endmembers[kk].mean[b])
                    .sum()
            })
            .collect();
        assert_eq!(recon, mu);
    }

    #[test]
    fn noiseless_pixels_are_exact_mixtures() {
        let cfg = quiet(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cube = synth_scene(&cfg, &mut rng).unwrap();
        let b = cube.gt_bundles.as_ref().unwrap();
        for p in 0..cube.pixels() {
            let z = cube.abundance(p).unwrap();
            for (band, &x) in cube.spectrum(p).iter().enumerate() {
                let m: f64 = (0..3).map(|kk| z[kk] * b.endmembers[kk].mean[band]).sum();
                assert!((x - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_mean_of_abundances() {
        let alpha = vec![2.0, 1.0, 0.5];
        let cfg = SceneConfig {
            height: 100,
            width: 100,
            dirichlet_alpha: alpha.clone(),
            pure_pixel_fraction: 0.0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cube = synth_scene(&cfg, &mut rng).unwrap();
        let a0: f64 = alpha.iter().sum();
        let n = cube.pixels() as f64;
        for kk in 0..3 {
            let m = alpha[kk] / a0;
            let var = m * (1.0 - m) / (a0 + 1.0);
            let emp = (0..cube.pixels()).map(|p| cube.abundance(p).unwrap()[kk]).sum::<f64>() / n;
            assert!((emp - m).abs() < 3.0 * (var / n).sqrt(), "k={kk}: {emp} vs {m}");
        }
    }

    #[test]
    fn pure_fraction_produces_dominant_pixels() {
        let cfg = SceneConfig {
            pure_pixel_fraction: 0.2,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cube = synth_scene(&cfg, &mut rng).unwrap();
        let dominant = (0..cube.pixels())
            .filter(|&p| cube.abundance(p).unwrap().iter().any(|&z| z > 0.85))
            .count();
        assert!(dominant as f64 >= 0.18 * cube.pixels() as f64);
        assert!(cube.reflectance.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut cfg = SceneConfig::default();
        cfg.noise_sigma = -0.1;
        match cfg.validate() {
            Err(DataError::InvalidConfig { field, .. }) => assert_eq!(field, "noise_sigma"),
            other => panic!("unexpected {other:?}"),
        }
        cfg = SceneConfig::default();
        cfg.endmembers = 1;
        assert!(cfg.validate().is_err());
        cfg = SceneConfig::default();
        cfg.bands = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_shapes_are_distinct() {
        let shapes = default_mean_shapes(6, 48);
        for i in 0..6 {
            for j in i + 1..6 {
                let dot: f64 = shapes[i].iter().zip(&shapes[j]).map(|(a, b)| a * b).sum();
                let ni = shapes[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = shapes[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                let angle = (dot / (ni * nj)).clamp(-1.0, 1.0).acos();
                assert!(angle > 0.1, "{i} vs {j}: {angle}");
            }
        }
    }
}
