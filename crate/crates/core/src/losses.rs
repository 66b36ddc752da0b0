//! Loss terms and the endmember-weight annealing schedule.
//!
//! Total loss per pixel:
//! `recon + kl_dirichlet + lambda_ab * abundance + lambda_em(epoch) * endmember`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{segments, BundleSet, DataError, EndmemberBundle};
use crate::model::PredBundle;
use crate::numcore::linalg::lower_inverse;
use crate::numcore::{NumError, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{op}: length {lhs} vs {rhs}")]
    LengthMismatch { op: &'static str, lhs: usize, rhs: usize },
    #[error("{op}: non-positive concentration {value}")]
    NonPositive { op: &'static str, value: f64 },
    #[error("non-finite loss term `{term}`")]
    NonFinite { term: &'static str },
    #[error("invalid loss weights `{field}`: {msg}")]
    InvalidWeights { field: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_abundances: f64,
    pub lambda_endmembers_start: f64,
    pub lambda_endmembers_end: f64,
    pub anneal_epochs: f64,
    /// Dirichlet prior concentrations; empty means all ones.
    pub alpha_prior: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_abundances: 1.0,
            lambda_endmembers_start: 1e-6,
            lambda_endmembers_end: 1.0,
            anneal_epochs: 80_000.0,
            alpha_prior: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: String| Err(LossError::InvalidWeights { field, msg });
        if !(self.lambda_abundances >= 0.0) {
            return bad("lambda_abundances", format!("must be >= 0, got {}", self.lambda_abundances));
        }
        if !(self.lambda_endmembers_start > 0.0 && self.lambda_endmembers_start < self.lambda_endmembers_end)
            || !self.lambda_endmembers_end.is_finite()
        {
            return bad(
                "lambda_endmembers_start",
                format!(
                    "need 0 < start < end, got {} and {}",
                    self.lambda_endmembers_start, self.lambda_endmembers_end
                ),
            );
        }
        if !(self.anneal_epochs > 0.0) {
            return bad("anneal_epochs", format!("must be > 0, got {}", self.anneal_epochs));
        }
        if let Some(a) = self.alpha_prior.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return bad("alpha_prior", format!("entries must be positive, got {a}"));
        }
        Ok(())
    }

    /// Prior concentrations for `k` endmembers.
    pub fn prior(&self, k: usize) -> Result<Vec<f64>> {
        if self.alpha_prior.is_empty() {
            return Ok(vec![1.0; k]);
        }
        if self.alpha_prior.len() != k {
            return Err(LossError::LengthMismatch {
                op: "alpha_prior",
                lhs: self.alpha_prior.len(),
                rhs: k,
            });
        }
        Ok(self.alpha_prior.clone())
    }
}

/// Geometric interpolation `start * (end/start)^min(t / anneal_epochs, 1)`.
pub fn anneal_lambda(epoch: usize, w: &LossWeights) -> f64 {
    let frac = (epoch as f64 / w.anneal_epochs).min(1.0);
    if frac >= 1.0 {
        return w.lambda_endmembers_end;
    }
    w.lambda_endmembers_start * (w.lambda_endmembers_end / w.lambda_endmembers_start).powf(frac)
}

fn same_len(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::LengthMismatch { op, lhs: a.len(), rhs: b.len() });
    }
    Ok(())
}

/// Mean squared error over bands.
pub fn loss_recon<'t>(x_recon: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    same_len("loss_recon", x_recon, x)?;
    Ok(x_recon.sub(x)?.square().mean())
}

/// Mean squared error between abundance vectors.
pub fn loss_abundance<'t>(z_hat: Var<'t>, z_gt: Var<'t>) -> Result<Var<'t>> {
    same_len("loss_abundance", z_hat, z_gt)?;
    Ok(z_hat.sub(z_gt)?.square().mean())
}

fn check_positive(op: &'static str, v: Var<'_>) -> Result<()> {
    match v.data().into_iter().find(|a| !(*a > 0.0)) {
        Some(value) => Err(LossError::NonPositive { op, value }),
        None => Ok(()),
    }
}

/// `KL(Dir(alpha_hat) || Dir(alpha_prior))` in closed form.
pub fn kl_dirichlet<'t>(alpha_hat: Var<'t>, alpha_prior: Var<'t>) -> Result<Var<'t>> {
    same_len("kl_dirichlet", alpha_hat, alpha_prior)?;
    check_positive("kl_dirichlet", alpha_hat)?;
    check_positive("kl_dirichlet", alpha_prior)?;
    let s = alpha_hat.sum();
    let s0 = alpha_prior.sum();
    let norm = s.lgamma().sub(alpha_hat.lgamma().sum())?.sub(s0.lgamma())?.add(alpha_prior.lgamma().sum())?;
    let cross = alpha_hat
        .sub(alpha_prior)?
        .mul(alpha_hat.digamma().sub(s.digamma())?)?
        .sum();
    Ok(norm.add(cross)?)
}

/// One ground-truth block prepared for repeated KL evaluation.
#[derive(Clone, Debug)]
struct TargetBlock {
    start: usize,
    len: usize,
    /// `L^{-1}` of the ground-truth factor, row-major.
    inv_chol: Tensor,
    log_det: f64,
}

/// Scene-level ground-truth bundles with per-block inverse factors cached.
#[derive(Clone, Debug)]
pub struct BundleTarget {
    pub seg_len: usize,
    pub bands: usize,
    means: Vec<Vec<f64>>,
    blocks: Vec<Vec<TargetBlock>>,
}

impl BundleTarget {
    pub fn new(set: &BundleSet) -> Result<Self> {
        set.validate()?;
        let bands = set.bands();
        let segs = segments(bands, set.seg_len);
        let mut blocks = Vec::with_capacity(set.len());
        for e in &set.endmembers {
            let mut eb = Vec::with_capacity(segs.len());
            for (s, &(start, len)) in segs.iter().enumerate() {
                let l = e.block_flat(s);
                let log_det = 2.0 * (0..len).map(|i| l[i * len + i].ln()).sum::<f64>();
                eb.push(TargetBlock {
                    start,
                    len,
                    inv_chol: Tensor::new(vec![len, len], lower_inverse(&l, len))?,
                    log_det,
                });
            }
            blocks.push(eb);
        }
        Ok(Self {
            seg_len: set.seg_len,
            bands,
            means: set.means(),
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// `KL(N(mu_hat, L_hat L_hat^T) || N(mu, L L^T))` summed over the blocks of
/// endmember `k`.
fn gaussian_kl<'t>(pred: &PredBundle<'t>, target: &BundleTarget, k: usize) -> Result<Var<'t>> {
    let tape = pred.mean.tape();
    if pred.chol.len() != target.blocks[k].len() || pred.mean.len() != target.bands {
        return Err(LossError::LengthMismatch {
            op: "kl_bundle",
            lhs: pred.chol.len(),
            rhs: target.blocks[k].len(),
        });
    }
    let mut total: Option<Var<'t>> = None;
    for (b, blk) in target.blocks[k].iter().enumerate() {
        let n = blk.len;
        if pred.chol[b].shape() != [n, n] {
            return Err(LossError::LengthMismatch {
                op: "kl_bundle",
                lhs: pred.chol[b].shape()[0],
                rhs: n,
            });
        }
        let m = tape.constant(blk.inv_chol.clone());
        let trace = m.matmul(pred.chol[b])?.square().sum();
        let mu = tape.constant(Tensor::new(vec![n], target.means[k][blk.start..blk.start + n].to_vec())?);
        let diff = mu.sub(pred.mean.slice(0, blk.start, n)?)?.reshape(&[n, 1])?;
        let maha = m.matmul(diff)?.square().sum();
        let log_det_hat = pred.chol_diag[b].ln().sum().scale(2.0);
        let kl = trace
            .add(maha)?
            .add_scalar(blk.log_det - n as f64)
            .sub(log_det_hat)?
            .scale(0.5);
        total = Some(match total {
            Some(t) => t.add(kl)?,
            None => kl,
        });
    }
    total.ok_or(LossError::LengthMismatch { op: "kl_bundle", lhs: 0, rhs: 0 })
}

/// `sum_k w_k KL(pred_k || target_k)` with `w = alpha_hat / sum(alpha_hat)`.
pub fn kl_bundle<'t>(pred: &[PredBundle<'t>], target: &BundleTarget, alpha_hat: Var<'t>) -> Result<Var<'t>> {
    if pred.len() != target.len() || alpha_hat.len() != pred.len() {
        return Err(LossError::LengthMismatch {
            op: "kl_bundle",
            lhs: pred.len(),
            rhs: target.len(),
        });
    }
    let kls = pred
        .iter()
        .enumerate()
        .map(|(k, p)| gaussian_kl(p, target, k).and_then(|v| Ok(v.reshape(&[1])?)))
        .collect::<Result<Vec<_>>>()?;
    let kls = Var::concat(&kls, 0)?;
    let w = alpha_hat.div(alpha_hat.sum())?;
    Ok(w.mul(kls)?.sum())
}

/// Value-only Gaussian KL between two bundles with the same segmentation.
pub fn bundle_kl_value(pred: &EndmemberBundle, gt: &EndmemberBundle, seg_len: usize) -> Result<f64> {
    let bands = gt.mean.len();
    if pred.mean.len() != bands {
        return Err(LossError::LengthMismatch {
            op: "bundle_kl_value",
            lhs: pred.mean.len(),
            rhs: bands,
        });
    }
    let mut kl = 0.0;
    for (s, (start, n)) in segments(bands, seg_len).into_iter().enumerate() {
        let l = gt.block_flat(s);
        let lh = pred.block_flat(s);
        let m = lower_inverse(&l, n);
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|t| m[i * n + t] * lh[t * n + j]).sum();
                trace += v * v;
            }
        }
        let mut maha = 0.0;
        for i in 0..n {
            let v: f64 = (0..n).map(|t| m[i * n + t] * (gt.mean[start + t] - pred.mean[start + t])).sum();
            maha += v * v;
        }
        let ld = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
        let ldh = 2.0 * (0..n).map(|i| lh[i * n + i].ln()).sum::<f64>();
        kl += 0.5 * (trace + maha - n as f64 + ld - ldh);
    }
    Ok(kl)
}

/// Per-pixel loss terms on a tape.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub recon: Var<'t>,
    pub kl_dirichlet: Var<'t>,
    pub abundance: Var<'t>,
    pub endmember: Var<'t>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_dirichlet: f64,
    pub abundance: f64,
    pub endmember: f64,
    pub total: f64,
    pub lambda_endmembers_now: f64,
}

impl LossBreakdown {
    /// Combine plain term values with the weights active at `epoch`.
    pub fn from_parts(recon: f64, kl_dirichlet: f64, abundance: f64, endmember: f64, w: &LossWeights, epoch: usize) -> Result<Self> {
        for (term, v) in [
            ("recon", recon),
            ("kl_dirichlet", kl_dirichlet),
            ("abundance", abundance),
            ("endmember", endmember),
        ] {
            if !v.is_finite() {
                return Err(LossError::NonFinite { term });
            }
        }
        let lam = anneal_lambda(epoch, w);
        Ok(Self {
            recon,
            kl_dirichlet,
            abundance,
            endmember,
            total: recon + kl_dirichlet + w.lambda_abundances * abundance + lam * endmember,
            lambda_endmembers_now: lam,
        })
    }
}

/// Weighted total of the loss terms plus its breakdown.
pub fn total_loss<'t>(parts: LossTerms<'t>, w: &LossWeights, epoch: usize) -> Result<(Var<'t>, LossBreakdown)> {
    let b = LossBreakdown::from_parts(
        parts.recon.item(),
        parts.kl_dirichlet.item(),
        parts.abundance.item(),
        parts.endmember.item(),
        w,
        epoch,
    )?;
    let total = parts
        .recon
        .add(parts.kl_dirichlet)?
        .add(parts.abundance.scale(w.lambda_abundances))?
        .add(parts.endmember.scale(b.lambda_endmembers_now))?;
    Ok((total, b))
}
