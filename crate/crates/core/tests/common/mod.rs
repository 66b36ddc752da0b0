#![allow(dead_code)]

pub mod gradsuite;

use ldvae_t::data::{BundleSet, EndmemberBundle};
use ldvae_t::losses::{
    kl_bundle, kl_dirichlet, loss_abundance, loss_recon, total_loss, BundleTarget, LossTerms, LossWeights,
};
use ldvae_t::model::{BoundParams, Ldvae, ModelConfig, Sampling};
use ldvae_t::numcore::{NoiseStream, Result as NumResult, Tape, Tensor, Var};

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        patch: 1,
        bands: 8,
        endmembers: 2,
        seg_len: 4,
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        decoder_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Two 8-band bundles with correlated 4-band blocks.
pub fn toy_bundles() -> BundleSet {
    let block = |s: f64| -> Vec<Vec<f64>> {
        (0..4)
            .map(|i| (0..4).map(|j| if i == j { s } else if j < i { 0.3 * s } else { 0.0 }).collect())
            .collect()
    };
    BundleSet {
        seg_len: 4,
        endmembers: vec![
            EndmemberBundle {
                name: "soil".into(),
                mean: (0..8).map(|b| 0.2 + 0.03 * b as f64).collect(),
                chol_blocks: vec![block(0.05), block(0.04)],
            },
            EndmemberBundle {
                name: "water".into(),
                mean: (0..8).map(|b| 0.4 - 0.02 * b as f64).collect(),
                chol_blocks: vec![block(0.03), block(0.06)],
            },
        ],
    }
}

pub fn toy_patch() -> Tensor {
    Tensor::new(vec![1, 1, 8], (0..8).map(|b| 0.25 + 0.1 * ((b as f64) * 0.7).sin()).collect()).unwrap()
}

/// Model with the concentration head shifted away from alpha = 1, where the
/// boosted Gamma transform switches branches.
pub fn toy_model(seed: u64) -> Ldvae {
    let mut m = Ldvae::new(toy_config(), seed).unwrap();
    let b = m.params.get_mut("head.b").unwrap();
    b.data_mut().copy_from_slice(&[1.2, 0.4]);
    m
}

/// Total loss of the full pipeline for one pixel under fixed noise.
pub fn pipeline_loss<'t>(
    model: &Ldvae,
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    noise: &mut NoiseStream,
    target: &BundleTarget,
    epoch: usize,
) -> NumResult<Var<'t>> {
    let wrap = |e: String| ldvae_t::numcore::NumError::Invalid { op: "pipeline", msg: e };
    let f = model
        .forward(tape, bound, &toy_patch(), noise, Sampling::Sample)
        .map_err(|e| wrap(e.to_string()))?;
    let x = tape.constant(Tensor::vector(toy_patch().into_data()));
    let z_gt = tape.constant(Tensor::vector(vec![0.7, 0.3]));
    let prior = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let parts = (|| -> Result<LossTerms<'t>, ldvae_t::losses::LossError> {
        Ok(LossTerms {
            recon: loss_recon(f.x_recon, x)?,
            kl_dirichlet: kl_dirichlet(f.alpha, prior)?,
            abundance: loss_abundance(f.z, z_gt)?,
            endmember: kl_bundle(&f.bundles, target, f.alpha)?,
        })
    })()
    .map_err(|e| wrap(e.to_string()))?;
    let (total, _) = total_loss(parts, &LossWeights::default(), epoch).map_err(|e| wrap(e.to_string()))?;
    Ok(total)
}
