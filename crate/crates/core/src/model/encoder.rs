use super::{BoundParams, ModelConfig, ModelError, Result};
use crate::numcore::{Tape, Tensor, Var};

pub struct EncodeOutput<'t> {
    /// Final token states `[S, d]` after the closing layer norm.
    pub tokens: Var<'t>,
    /// Max-pooled latent `[d]`.
    pub x_latent: Var<'t>,
}

/// Raw segment tokens of a `[P, P, C]` patch: pixels in row-major order,
/// segments ascending within a pixel, the last segment zero-padded.
pub(crate) fn raw_tokens(patch: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (p, c, l) = (cfg.patch, cfg.bands, cfg.seg_len);
    if patch.shape() != [p, p, c] {
        return Err(ModelError::Config {
            field: "patch",
            msg: format!("patch has shape {:?}, expected [{p}, {p}, {c}]", patch.shape()),
        });
    }
    let nseg = c.div_ceil(l);
    let mut data = vec![0.0; p * p * nseg * l];
    for (px, spec) in patch.data().chunks(c).enumerate() {
        for s in 0..nseg {
            let start = s * l;
            let len = l.min(c - start);
            let row = (px * nseg + s) * l;
            data[row..row + len].copy_from_slice(&spec[start..start + len]);
        }
    }
    Ok(Tensor::new(vec![p * p * nseg, l], data)?)
}

/// Project segment tokens to `d_model` and add positional encodings.
pub fn tokenize_patch<'t>(tape: &'t Tape, params: &BoundParams<'t>, patch: &Tensor, cfg: &ModelConfig) -> Result<Var<'t>> {
    let raw = tape.constant(raw_tokens(patch, cfg)?);
    Ok(raw
        .matmul(params.get("enc.tok.w")?)?
        .add(params.get("enc.tok.b")?)?
        .add(params.get("enc.pos")?)?)
}

fn attention<'t>(x: Var<'t>, params: &BoundParams<'t>, pre: &str, cfg: &ModelConfig) -> Result<Var<'t>> {
    let proj = |w: &str| -> Result<Var<'t>> {
        Ok(x.matmul(params.get(&format!("{pre}.attn.w{w}"))?)?
            .add(params.get(&format!("{pre}.attn.b{w}"))?)?)
    };
    let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let weights = qh.matmul(kh.transpose()?)?.scale(scale).softmax(1)?;
        heads.push(weights.matmul(vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1)? };
    Ok(merged
        .matmul(params.get(&format!("{pre}.attn.wo"))?)?
        .add(params.get(&format!("{pre}.attn.bo"))?)?)
}

fn feed_forward<'t>(x: Var<'t>, params: &BoundParams<'t>, pre: &str) -> Result<Var<'t>> {
    let h = x
        .matmul(params.get(&format!("{pre}.ff.w1"))?)?
        .add(params.get(&format!("{pre}.ff.b1"))?)?
        .gelu();
    Ok(h.matmul(params.get(&format!("{pre}.ff.w2"))?)?
        .add(params.get(&format!("{pre}.ff.b2"))?)?)
}

fn norm<'t>(x: Var<'t>, params: &BoundParams<'t>, name: &str, eps: f64) -> Result<Var<'t>> {
    Ok(x.layer_norm(params.get(&format!("{name}.g"))?, params.get(&format!("{name}.b"))?, eps)?)
}

/// Pre-norm transformer over `[S, d]` tokens followed by max pooling.
pub fn encode<'t>(tokens: Var<'t>, params: &BoundParams<'t>, cfg: &ModelConfig) -> Result<EncodeOutput<'t>> {
    let mut x = tokens;
    for l in 0..cfg.layers {
        let pre = format!("enc.l{l}");
        let a = norm(x, params, &format!("{pre}.ln1"), cfg.ln_eps)?;
        x = x.add(attention(a, params, &pre, cfg)?)?;
        let f = norm(x, params, &format!("{pre}.ln2"), cfg.ln_eps)?;
        x = x.add(feed_forward(f, params, &pre)?)?;
    }
    let out = norm(x, params, "enc.ln_f", cfg.ln_eps)?;
    let x_latent = out.max_reduce(0)?;
    Ok(EncodeOutput { tokens: out, x_latent })
}

/// Dirichlet concentrations `softplus(W x + b) + eps`, shape `[K]`.
pub fn alpha_head<'t>(x_latent: Var<'t>, params: &BoundParams<'t>, cfg: &ModelConfig) -> Result<Var<'t>> {
    let d = cfg.d_model;
    let logits = x_latent
        .reshape(&[1, d])?
        .matmul(params.get("head.w")?)?
        .add(params.get("head.b")?)?;
    Ok(logits.softplus().add_scalar(cfg.eps_alpha).reshape(&[cfg.endmembers])?)
}
