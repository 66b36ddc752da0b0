//! Reparameterised Gamma(α, 1) sampling.
//!
//! Draws use the Marsaglia-Tsang squeeze. The accepted standard normal `n`
//! is kept as noise so the sample `d (1 + c n)^3` with `d = α - 1/3`,
//! `c = 1/sqrt(9d)` can be differentiated in α. Shapes below one are boosted:
//! sample at α + 1 and multiply by `u^(1/α)`. The rejection-correction term
//! of the pathwise gradient is not included.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::Var;
use super::{NumError, Result};

/// Noise consumed by one Gamma draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaDraw {
    /// Accepted standard-normal variate of the squeeze.
    pub normal: f64,
    /// Uniform in (0, 1] used by the shape boost when α < 1.
    pub uniform: f64,
}

#[derive(Clone, Debug)]
enum Source {
    Draw(ChaCha8Rng),
    Replay,
}

/// Random stream for the model's sampling steps.
///
/// In draw mode every variate is also recorded; [`NoiseStream::replay`]
/// returns a stream that yields the same variates again, which keeps the
/// noise fixed across repeated forward passes (gradient checks).
#[derive(Clone, Debug)]
pub struct NoiseStream {
    source: Source,
    gamma: Vec<GammaDraw>,
    normal: Vec<f64>,
    gamma_pos: usize,
    normal_pos: usize,
}

impl NoiseStream {
    pub fn from_seed(seed: u64) -> Self {
        Self::from_rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        Self {
            source: Source::Draw(rng),
            gamma: Vec::new(),
            normal: Vec::new(),
            gamma_pos: 0,
            normal_pos: 0,
        }
    }

    /// A stream that replays everything recorded so far.
    pub fn replay(&self) -> Self {
        Self {
            source: Source::Replay,
            gamma: self.gamma.clone(),
            normal: self.normal.clone(),
            gamma_pos: 0,
            normal_pos: 0,
        }
    }

    /// Drop the recorded variates; a later [`NoiseStream::replay`] starts
    /// from this point.
    pub fn clear_log(&mut self) {
        self.gamma.clear();
        self.normal.clear();
        self.gamma_pos = 0;
        self.normal_pos = 0;
    }

    pub fn gamma_draw(&mut self, alpha: f64) -> Result<GammaDraw> {
        if !(alpha > 0.0) {
            return Err(NumError::NonPositive { op: "gamma_draw", value: alpha });
        }
        match &mut self.source {
            Source::Draw(rng) => {
                let shape = if alpha < 1.0 { alpha + 1.0 } else { alpha };
                let normal = marsaglia_tsang_normal(shape, rng);
                let uniform = 1.0 - rng.random::<f64>();
                let draw = GammaDraw { normal, uniform };
                self.gamma.push(draw);
                Ok(draw)
            }
            Source::Replay => {
                let d = self.gamma.get(self.gamma_pos).copied().ok_or(NumError::Invalid {
                    op: "gamma_draw",
                    msg: "replay stream exhausted".into(),
                })?;
                self.gamma_pos += 1;
                Ok(d)
            }
        }
    }

    pub fn normal(&mut self) -> Result<f64> {
        match &mut self.source {
            Source::Draw(rng) => {
                let n: f64 = rng.sample(StandardNormal);
                self.normal.push(n);
                Ok(n)
            }
            Source::Replay => {
                let n = self.normal.get(self.normal_pos).copied().ok_or(NumError::Invalid {
                    op: "normal",
                    msg: "replay stream exhausted".into(),
                })?;
                self.normal_pos += 1;
                Ok(n)
            }
        }
    }
}

/// Accepted normal variate of the Marsaglia-Tsang method for `shape >= 1`.
fn marsaglia_tsang_normal<R: Rng>(shape: f64, rng: &mut R) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let n: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * n;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * n.powi(4) {
            return n;
        }
        if u.ln() < 0.5 * n * n + d * (1.0 - v + v.ln()) {
            return n;
        }
    }
}

/// `ln Gamma(α, 1)` sample and its derivative in α for fixed noise.
pub(crate) fn log_gamma_transform(alpha: f64, draw: GammaDraw) -> (f64, f64) {
    let boosted = alpha < 1.0;
    let shape = if boosted { alpha + 1.0 } else { alpha };
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    let t = 1.0 + c * draw.normal;
    let mut value = d.ln() + 3.0 * t.ln();
    let mut dvalue = 1.0 / d - 3.0 * draw.normal * c / (2.0 * d * t);
    if boosted {
        let lu = draw.uniform.ln();
        value += lu / alpha;
        dvalue -= lu / (alpha * alpha);
    }
    (value, dvalue)
}

impl<'t> Var<'t> {
    /// Elementwise `ln g` with `g ~ Gamma(self, 1)`, differentiable in the
    /// shape through the pathwise transform.
    pub fn log_gamma_reparam(&self, noise: &mut NoiseStream) -> Result<Var<'t>> {
        let alpha = self.data();
        let mut value = Vec::with_capacity(alpha.len());
        let mut dout = Vec::with_capacity(alpha.len());
        for &a in &alpha {
            let draw = noise.gamma_draw(a)?;
            let (v, dv) = log_gamma_transform(a, draw);
            value.push(v);
            dout.push(dv);
        }
        Ok(self.pathwise(value, dout))
    }

    /// Elementwise `g ~ Gamma(self, 1)`.
    pub fn gamma_reparam(&self, noise: &mut NoiseStream) -> Result<Var<'t>> {
        Ok(self.log_gamma_reparam(noise)?.exp())
    }
}

/// Reparameterised Gamma(α, 1) samples for every entry of `alpha`.
pub fn sample_gamma_reparam<'t>(alpha: Var<'t>, noise: &mut NoiseStream) -> Result<Var<'t>> {
    alpha.gamma_reparam(noise)
}
