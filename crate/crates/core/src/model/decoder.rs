use super::{BoundParams, ModelConfig, Result};
use crate::numcore::{NoiseStream, Tensor, Var};

/// Predicted Gaussian bundle of one endmember.
pub struct PredBundle<'t> {
    /// Mean spectrum `[C]`.
    pub mean: Var<'t>,
    /// Lower Cholesky factor `[l, l]` per spectral segment.
    pub chol: Vec<Var<'t>>,
    /// Diagonal of each factor `[l]`, strictly positive.
    pub chol_diag: Vec<Var<'t>>,
}

/// Flat position of `(i, j)`, `j <= i`, in a row-major lower triangle.
fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Bundle MLP: `x_latent` to per-endmember means and Cholesky factors.
/// Diagonal entries pass through `softplus + eps_chol`.
pub fn decode_bundles<'t>(x_latent: Var<'t>, params: &BoundParams<'t>, cfg: &ModelConfig) -> Result<Vec<PredBundle<'t>>> {
    let out = x_latent
        .reshape(&[1, cfg.d_model])?
        .matmul(params.get("dec.mlp1.w1")?)?
        .add(params.get("dec.mlp1.b1")?)?
        .gelu()
        .matmul(params.get("dec.mlp1.w2")?)?
        .add(params.get("dec.mlp1.b2")?)?
        .reshape(&[cfg.bundle_dim()])?;
    let c = cfg.bands;
    let per_em = c + cfg.chol_entries();
    let segs = cfg.segments();
    let mut bundles = Vec::with_capacity(cfg.endmembers);
    for k in 0..cfg.endmembers {
        let base = k * per_em;
        let mean = out.slice(0, base, c)?;
        let mut chol = Vec::with_capacity(segs.len());
        let mut chol_diag = Vec::with_capacity(segs.len());
        let mut off = base + c;
        for &(_, l) in &segs {
            let n = l * (l + 1) / 2;
            let raw = out.slice(0, off, n)?;
            off += n;
            let pos = raw.softplus().add_scalar(cfg.eps_chol);
            let mut lower = Vec::with_capacity(l * l);
            let mut diag = Vec::with_capacity(l * l);
            for i in 0..l {
                for j in 0..l {
                    lower.push((j < i).then(|| tri_index(i, j)));
                    diag.push((j == i).then(|| tri_index(i, i)));
                }
            }
            let factor = raw.gather(lower, &[l, l])?.add(pos.gather(diag, &[l, l])?)?;
            chol.push(factor);
            chol_diag.push(pos.gather((0..l).map(|i| Some(tri_index(i, i))).collect(), &[l])?);
        }
        bundles.push(PredBundle { mean, chol, chol_diag });
    }
    Ok(bundles)
}

/// `z = g / sum(g)` with `g_k ~ Gamma(alpha_k, 1)`, computed as a softmax of
/// `ln g` so tiny shapes do not underflow.
pub fn sample_abundances<'t>(alpha: Var<'t>, noise: &mut NoiseStream) -> Result<Var<'t>> {
    Ok(alpha.log_gamma_reparam(noise)?.softmax(0)?)
}

/// One reparameterised draw `mu + L n` per bundle, stacked to `[K, C]`.
pub fn sample_endmembers<'t>(bundles: &[PredBundle<'t>], noise: &mut NoiseStream) -> Result<Var<'t>> {
    let mut rows = Vec::with_capacity(bundles.len());
    for b in bundles {
        let tape = b.mean.tape();
        let mut parts = Vec::with_capacity(b.chol.len());
        for l in &b.chol {
            let n = l.shape()[0];
            let eps = (0..n).map(|_| noise.normal()).collect::<std::result::Result<Vec<_>, _>>()?;
            let eps = tape.constant(Tensor::new(vec![n, 1], eps)?);
            parts.push(l.matmul(eps)?.reshape(&[n])?);
        }
        let offset = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 0)? };
        let c = b.mean.len();
        rows.push(b.mean.add(offset)?.reshape(&[1, c])?);
    }
    Ok(Var::concat(&rows, 0)?)
}

/// Linear mixture `m = z E` refined by the residual MLP:
/// `x_hat = m + W2 gelu(W1 [m; z] + b1) + b2`.
pub fn reconstruct<'t>(z: Var<'t>, endmembers: Var<'t>, params: &BoundParams<'t>, cfg: &ModelConfig) -> Result<Var<'t>> {
    let k = cfg.endmembers;
    let zr = z.reshape(&[1, k])?;
    let mix = zr.matmul(endmembers)?;
    let refine = Var::concat(&[mix, zr], 1)?
        .matmul(params.get("dec.mlp2.w1")?)?
        .add(params.get("dec.mlp2.b1")?)?
        .gelu()
        .matmul(params.get("dec.mlp2.w2")?)?
        .add(params.get("dec.mlp2.b2")?)?;
    Ok(mix.add(refine)?.reshape(&[cfg.bands])?)
}
