//! Finite-difference checks shared by the gradient tests and the
//! acceptance run. Every function returns `(name, relative error)` pairs.

use super::{pipeline_loss, toy_bundles, toy_model};
use ldvae_t::losses::{kl_bundle, kl_dirichlet, loss_abundance, loss_recon, total_loss, BundleTarget, LossTerms, LossWeights};
use ldvae_t::model::PredBundle;
use ldvae_t::numcore::{finite_diff_check, NoiseStream, NumError, Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Report = Vec<(String, f64)>;

fn v(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec())
}

fn m(r: usize, c: usize, seed: u64) -> Tensor {
    let data = (0..r * c).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect();
    Tensor::matrix(r, c, data).unwrap()
}

fn check<F>(out: &mut Report, name: &str, f: F, x: &Tensor)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let err = finite_diff_check(f, x, H).unwrap_or(f64::INFINITY);
    out.push((name.to_string(), err));
}

/// Weighted sum so every output coordinate contributes a distinct slope.
fn probe<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.len();
    let w = y.tape().constant(Tensor::new(y.shape(), (0..n).map(|i| 0.3 + 0.1 * i as f64).collect())?);
    Ok(y.mul(w)?.sum())
}

pub fn elementwise() -> Report {
    let mut r = Report::new();
    let x = v(&[0.3, -1.2, 0.8, 2.1, -0.4]);
    let pos = v(&[0.3, 1.7, 0.8, 4.1, 0.45]);
    check(&mut r, "neg", |_, a| probe(a.neg()), &x);
    check(&mut r, "scale", |_, a| probe(a.scale(-2.5)), &x);
    check(&mut r, "add_scalar", |_, a| probe(a.add_scalar(0.7).square()), &x);
    check(&mut r, "exp", |_, a| probe(a.exp()), &x);
    check(&mut r, "ln", |_, a| probe(a.ln()), &pos);
    check(&mut r, "sqrt", |_, a| probe(a.sqrt()), &pos);
    check(&mut r, "square", |_, a| probe(a.square()), &x);
    check(&mut r, "softplus", |_, a| probe(a.softplus()), &x);
    check(&mut r, "gelu", |_, a| probe(a.gelu()), &x);
    check(&mut r, "lgamma", |_, a| probe(a.lgamma()), &pos);
    check(&mut r, "digamma", |_, a| probe(a.digamma()), &pos);
    check(&mut r, "mean", |_, a| Ok(a.square().mean()), &x);
    check(&mut r, "sum", |_, a| Ok(a.exp().sum()), &x);
    r
}

fn binary<'t>(op: u8, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    match op {
        0 => x.add(y),
        1 => x.sub(y),
        2 => x.mul(y),
        _ => x.div(y),
    }
}

/// Both operands of every binary op, plus a broadcast row on the right.
pub fn binary_ops() -> Report {
    let mut r = Report::new();
    let a = m(3, 4, 1);
    let b = m(3, 4, 2);
    let pos = Tensor::new(vec![3, 4], m(3, 4, 2).data().iter().map(|x| 1.5 + x).collect()).unwrap();
    let row = v(&[2.5, 1.7, 3.1, 2.9]);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let rhs = if op == 3 { pos.clone() } else { b.clone() };
        let r2 = rhs.clone();
        check(&mut r, &format!("{name} lhs"), move |t, x| probe(binary(op, x, t.constant(r2.clone()))?), &a);
        let lhs = a.clone();
        check(&mut r, &format!("{name} rhs"), move |t, y| probe(binary(op, t.constant(lhs.clone()), y)?), &rhs);
        let lhs = a.clone();
        check(&mut r, &format!("{name} broadcast"), move |t, y| probe(binary(op, t.constant(lhs.clone()), y)?), &row);
    }
    r
}

pub fn matrix_and_shape() -> Report {
    let mut r = Report::new();
    let a = m(3, 4, 3);
    let b = m(4, 2, 4);
    let bb = b.clone();
    check(&mut r, "matmul lhs", move |t, x| probe(x.matmul(t.constant(bb.clone()))?), &a);
    let aa = a.clone();
    check(&mut r, "matmul rhs", move |t, y| probe(t.constant(aa.clone()).matmul(y)?), &b);
    check(&mut r, "transpose", |_, x| probe(x.transpose()?), &a);
    check(&mut r, "reshape", |_, x| probe(x.reshape(&[2, 6])?.square()), &a);
    check(&mut r, "slice", |_, x| probe(x.slice(1, 1, 2)?.exp()), &a);
    check(&mut r, "concat", |t, x| probe(Var::concat(&[x, t.constant(Tensor::zeros(&[3, 2])), x.scale(2.0)], 1)?), &a);
    check(&mut r, "gather", |_, x| probe(x.gather(vec![Some(0), None, Some(5), Some(5), Some(11)], &[5])?), &a);
    check(&mut r, "softmax rows", |_, x| probe(x.softmax(1)?), &a);
    check(&mut r, "softmax cols", |_, x| probe(x.softmax(0)?), &a);
    check(&mut r, "max rows", |_, x| probe(x.max_reduce(0)?), &a);
    check(&mut r, "sum_axis", |_, x| probe(x.sum_axis(1)?.square()), &a);
    let g = v(&[1.1, 0.9, -0.4, 2.0]);
    let beta = v(&[0.1, -0.2, 0.3, 0.0]);
    let (g2, b2) = (g.clone(), beta.clone());
    check(&mut r, "layer_norm x", move |t, x| probe(x.layer_norm(t.constant(g2.clone()), t.constant(b2.clone()), 1e-6)?), &a);
    let (a2, b3) = (a.clone(), beta.clone());
    check(&mut r, "layer_norm gain", move |t, x| probe(t.constant(a2.clone()).layer_norm(x, t.constant(b3.clone()), 1e-6)?), &g);
    let (a3, g3) = (a.clone(), g.clone());
    check(&mut r, "layer_norm shift", move |t, x| probe(t.constant(a3.clone()).layer_norm(t.constant(g3.clone()), x, 1e-6)?), &beta);
    r
}

/// Pathwise Gamma derivative with the noise recorded once and replayed.
pub fn gamma_reparam() -> Report {
    let mut r = Report::new();
    let alpha = v(&[0.4, 1.7, 3.2, 9.0]);
    let mut noise = NoiseStream::from_seed(17);
    let t = Tape::new();
    t.constant(alpha.clone()).gamma_reparam(&mut noise).unwrap();
    check(
        &mut r,
        "gamma_reparam",
        move |_, a| {
            let mut n = noise.replay();
            probe(a.gamma_reparam(&mut n)?)
        },
        &alpha,
    );
    r
}

fn wrap(e: ldvae_t::losses::LossError) -> NumError {
    NumError::Invalid {
        op: "loss",
        msg: e.to_string(),
    }
}

/// Predicted bundles near the toy targets; `means`, `factors` and `alpha`
/// replace the defaults when given.
fn toy_pred<'t>(tape: &'t Tape, means: Option<Var<'t>>, factors: Option<Var<'t>>) -> Result<Vec<PredBundle<'t>>> {
    let set = toy_bundles();
    let mean_all = match means {
        Some(x) => x,
        None => tape.constant(v(&set
            .endmembers
            .iter()
            .flat_map(|e| e.mean.iter().enumerate().map(|(b, m)| m + 0.05 * (b as f64).sin()))
            .collect::<Vec<_>>())),
    };
    let fac_all = match factors {
        Some(x) => x,
        None => tape.constant(v(&toy_factors())),
    };
    let mut out = Vec::new();
    for k in 0..2 {
        let mut chol = Vec::new();
        let mut chol_diag = Vec::new();
        for s in 0..2 {
            let block = fac_all.slice(0, (2 * k + s) * 16, 16)?.reshape(&[4, 4])?;
            chol_diag.push(block.gather(vec![Some(0), Some(5), Some(10), Some(15)], &[4])?);
            chol.push(block);
        }
        out.push(PredBundle {
            mean: mean_all.slice(0, 8 * k, 8)?,
            chol,
            chol_diag,
        });
    }
    Ok(out)
}

/// Lower-triangular toy factors moved away from the targets. A plain
/// rescaling would leave the strictly-lower gradient exactly zero.
pub fn toy_factors() -> Vec<f64> {
    toy_bundles()
        .endmembers
        .iter()
        .flat_map(|e| (0..2).flat_map(move |s| e.block_flat(s)))
        .enumerate()
        .map(|(i, x)| {
            let (r, c) = ((i % 16) / 4, i % 4);
            if c <= r {
                1.3 * x + 0.01 * (i as f64).sin()
            } else {
                0.0
            }
        })
        .collect()
}

pub fn loss_terms() -> Report {
    let mut r = Report::new();
    let x = v(&[0.2, 0.35, 0.5, 0.1]);
    let xr = v(&[0.25, 0.3, 0.55, 0.0]);
    check(&mut r, "loss_recon", move |t, a| loss_recon(a, t.constant(x.clone())).map_err(wrap), &xr);
    let z = v(&[0.6, 0.3, 0.1]);
    check(&mut r, "loss_abundance", |t, a| loss_abundance(a, t.constant(v(&[0.2, 0.5, 0.3]))).map_err(wrap), &z);
    let ah = v(&[2.0, 0.7, 5.5]);
    check(&mut r, "kl_dirichlet q", |t, a| kl_dirichlet(a, t.constant(v(&[1.0, 1.5, 0.8]))).map_err(wrap), &ah);
    check(&mut r, "kl_dirichlet p", |t, a| kl_dirichlet(t.constant(v(&[2.0, 0.7, 5.5])), a).map_err(wrap), &v(&[1.0, 1.5, 0.8]));

    let target = BundleTarget::new(&toy_bundles()).unwrap();
    let alpha = v(&[1.4, 0.6]);
    let means: Vec<f64> = toy_bundles().endmembers.iter().flat_map(|e| e.mean.iter().map(|m| m + 0.07)).collect();
    let (tg, al) = (&target, alpha.clone());
    check(
        &mut r,
        "kl_bundle means",
        move |t, x| kl_bundle(&toy_pred(t, Some(x), None)?, tg, t.constant(al.clone())).map_err(wrap),
        &v(&means),
    );
    let al = alpha.clone();
    check(
        &mut r,
        "kl_bundle factors",
        move |t, x| kl_bundle(&toy_pred(t, None, Some(x))?, tg, t.constant(al.clone())).map_err(wrap),
        &v(&toy_factors()),
    );
    check(&mut r, "kl_bundle weights", |t, x| kl_bundle(&toy_pred(t, None, None)?, tg, x).map_err(wrap), &alpha);
    check(
        &mut r,
        "total_loss",
        |t, x| {
            let s = |i: usize| x.slice(0, i, 1).and_then(|p| p.reshape(&[]));
            let parts = LossTerms {
                recon: s(0)?,
                kl_dirichlet: s(1)?,
                abundance: s(2)?,
                endmember: s(3)?.square(),
            };
            let _ = t;
            total_loss(parts, &LossWeights::default(), 40_000).map(|(v, _)| v).map_err(wrap)
        },
        &v(&[0.3, 0.2, 0.1, 2.0]),
    );
    r
}

/// Gradient check of the whole model with respect to every parameter tensor
/// on the toy config. Also returns the largest |gradient| of the attention
/// key bias, which is identically zero.
pub fn pipeline() -> (Report, f64) {
    let model = toy_model(7);
    let target = BundleTarget::new(&toy_bundles()).unwrap();
    let mut noise = NoiseStream::from_seed(3);
    {
        let tape = Tape::new();
        let bound = model.params.bind_constant(&tape);
        pipeline_loss(&model, &tape, &bound, &mut noise, &target, 80_000).unwrap();
    }
    let mut r = Report::new();
    let mut key_bias = 0.0f64;
    for (name, value) in model.params.iter() {
        if name.ends_with("attn.bk") {
            // a common key offset shifts each score row by a constant, which
            // softmax ignores
            let tape = Tape::new();
            let x = tape.param(value.clone());
            let bound = model.params.bind_with_override(&tape, name, x);
            let mut n = noise.replay();
            let loss = pipeline_loss(&model, &tape, &bound, &mut n, &target, 80_000).unwrap();
            let g = tape.backward(loss).unwrap().get(x).unwrap();
            key_bias = g.data().iter().fold(key_bias, |a, v| a.max(v.abs()));
            continue;
        }
        let err = finite_diff_check(
            |tape, x| {
                let bound = model.params.bind_with_override(tape, name, x);
                let mut n = noise.replay();
                pipeline_loss(&model, tape, &bound, &mut n, &target, 80_000)
            },
            value,
            H,
        )
        .unwrap_or(f64::INFINITY);
        r.push((name.clone(), err));
    }
    (r, key_bias)
}

pub fn worst(r: &Report) -> (String, f64) {
    r.iter().fold((String::new(), 0.0), |acc, (n, e)| if *e > acc.1 || e.is_nan() { (n.clone(), *e) } else { acc })
}
