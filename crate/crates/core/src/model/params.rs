use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result};
use crate::data::BundleSet;
use crate::numcore::{Tape, Tensor, Var};

/// Named parameter tensors, kept in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect(),
        }
    }

    /// Register every parameter as a constant (no gradients).
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect(),
        }
    }
}

impl ParamStore {
    /// Bind every parameter as a constant except `name`, which is replaced
    /// by `var`. Used to differentiate with respect to a single tensor.
    pub fn bind_with_override<'t>(&self, tape: &'t Tape, name: &str, var: Var<'t>) -> BoundParams<'t> {
        let mut b = self.bind_constant(tape);
        b.vars.insert(name.to_string(), var);
        b
    }
}

/// Parameters registered on one tape.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weight `[fan_in, fan_out]` drawn from `U(-s, s)` with `s = 1/sqrt(fan_in)`.
fn dense<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// Inverse of `softplus` for `y > 0`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

const DEFAULT_MEAN: f64 = 0.5;
const DEFAULT_CHOL_DIAG: f64 = 0.01;
const BUNDLE_OUT_SHRINK: f64 = 0.01;

pub(crate) fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    p.insert("enc.tok.w", dense(rng, cfg.seg_len, d));
    p.insert("enc.tok.b", Tensor::zeros(&[d]));
    p.insert("enc.pos", uniform(rng, &[cfg.tokens(), d], 0.02));
    for l in 0..cfg.layers {
        let pre = format!("enc.l{l}");
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{pre}.{ln}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.{ln}.b"), Tensor::zeros(&[d]));
        }
        for w in ["q", "k", "v", "o"] {
            p.insert(format!("{pre}.attn.w{w}"), dense(rng, d, d));
            p.insert(format!("{pre}.attn.b{w}"), Tensor::zeros(&[d]));
        }
        p.insert(format!("{pre}.ff.w1"), dense(rng, d, cfg.ff_dim));
        p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[cfg.ff_dim]));
        p.insert(format!("{pre}.ff.w2"), dense(rng, cfg.ff_dim, d));
        p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[d]));
    }
    p.insert("enc.ln_f.g", Tensor::full(&[d], 1.0));
    p.insert("enc.ln_f.b", Tensor::zeros(&[d]));

    let k = cfg.endmembers;
    p.insert("head.w", dense(rng, d, k));
    // softplus(ln(e - 1)) = 1: flat concentrations at start
    p.insert("head.b", Tensor::full(&[k], (std::f64::consts::E - 1.0).ln()));

    let h = cfg.decoder_hidden;
    let out = cfg.bundle_dim();
    p.insert("dec.mlp1.w1", dense(rng, d, h));
    p.insert("dec.mlp1.b1", Tensor::zeros(&[h]));
    let mut w2 = dense(rng, h, out);
    w2.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    p.insert("dec.mlp1.w2", w2);
    p.insert("dec.mlp1.b2", Tensor::vector(default_bundle_bias(cfg)));

    let c = cfg.bands;
    p.insert("dec.mlp2.w1", dense(rng, c + k, c));
    p.insert("dec.mlp2.b1", Tensor::zeros(&[c]));
    // zero output layer: the refinement starts as the identity on the mixture
    p.insert("dec.mlp2.w2", Tensor::zeros(&[c, c]));
    p.insert("dec.mlp2.b2", Tensor::zeros(&[c]));
    p
}

fn default_bundle_bias(cfg: &ModelConfig) -> Vec<f64> {
    let mut b = Vec::with_capacity(cfg.bundle_dim());
    let diag = softplus_inv(DEFAULT_CHOL_DIAG);
    for _ in 0..cfg.endmembers {
        b.extend(std::iter::repeat_n(DEFAULT_MEAN, cfg.bands));
        for (_, len) in cfg.segments() {
            for i in 0..len {
                for j in 0..=i {
                    b.push(if i == j { diag } else { 0.0 });
                }
            }
        }
    }
    b
}

pub(crate) fn init_decoder_from_bundles(cfg: &ModelConfig, p: &mut ParamStore, bundles: &BundleSet) -> Result<()> {
    let mismatch = |msg: String| Err(ModelError::Config { field: "endmembers", msg });
    if bundles.len() != cfg.endmembers {
        return mismatch(format!("{} bundles for {} endmembers", bundles.len(), cfg.endmembers));
    }
    if bundles.bands() != cfg.bands || bundles.seg_len != cfg.seg_len {
        return mismatch(format!(
            "bundles have {} bands / seg_len {}, model expects {} / {}",
            bundles.bands(),
            bundles.seg_len,
            cfg.bands,
            cfg.seg_len
        ));
    }
    bundles.validate_structure()?;
    let floor = softplus_inv(1e-12);
    let mut b = Vec::with_capacity(cfg.bundle_dim());
    for e in &bundles.endmembers {
        b.extend_from_slice(&e.mean);
        for (s, (_, len)) in cfg.segments().into_iter().enumerate() {
            let l = e.block_flat(s);
            for i in 0..len {
                for j in 0..=i {
                    let v = l[i * len + j];
                    b.push(if i == j {
                        let target = v - cfg.eps_chol;
                        if target > 1e-12 {
                            softplus_inv(target)
                        } else {
                            floor
                        }
                    } else {
                        v
                    });
                }
            }
        }
    }
    p.insert("dec.mlp1.b2", Tensor::vector(b));
    let w2 = p
        .get_mut("dec.mlp1.w2")
        .ok_or_else(|| ModelError::MissingParam("dec.mlp1.w2".into()))?;
    w2.data_mut().iter_mut().for_each(|v| *v *= BUNDLE_OUT_SHRINK);
    Ok(())
}
