//! Batch normalization and dropout.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BackwardCtx, BackwardRule, Real, Tensor, Var};

use super::{Ctx, Mode};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Normalizes each channel (axis 1) over the batch and any spatial axes.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running statistics; infer mode uses the running statistics only.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let count = (n * spatial) as f64;
        let eps = F::lit(self.epsilon);
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);

        let xv = ctx.tape.value(x).data();
        let (mean, var) = match ctx.mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        s += xv[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        q += xv[base..base + spatial]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                (mean, var)
            }
            Mode::Infer => (
                ctx.store.get(self.running_mean).to_f64_vec(),
                ctx.store.get(self.running_var).to_f64_vec(),
            ),
        };

        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (F::lit(v) + eps).sqrt()).collect();
        let mean_f: Vec<F> = mean.iter().map(|&m| F::lit(m)).collect();
        let g = ctx.tape.value(gamma).data();
        let b = ctx.tape.value(beta).data();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for k in base..base + spatial {
                    let h = (xv[k] - mean_f[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + b[ch];
                }
            }
        }

        if ctx.mode == Mode::Train {
            let mom = self.momentum;
            let rm = ctx.store.get_mut(self.running_mean);
            for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                *r = F::lit(mom * r.as_f64() + (1.0 - mom) * m);
            }
            let rv = ctx.store.get_mut(self.running_var);
            let floor = F::epsilon() * F::epsilon();
            for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                *r = F::lit(mom * r.as_f64() + (1.0 - mom) * v).max(floor);
            }
        }

        let value = Tensor::new(shape, out)?;
        ctx.tape.custom(
            value,
            Box::new(BnRule {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                spatial,
                batch_stats: ctx.mode == Mode::Train,
            }),
        )
    }
}

struct BnRule<F> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    channels: usize,
    spatial: usize,
    batch_stats: bool,
}

impl<F: Real> BackwardRule<F> for BnRule<F> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, _out: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (c, s) = (self.channels, self.spatial);
        let n = grad.len() / (c * s);
        let gamma = ctx.value(self.gamma).data();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    dgamma[ch] += grad[k] * self.xhat[k];
                    dbeta[ch] += grad[k];
                }
            }
        }
        let dx = ctx.requires_grad(self.x).then(|| {
            let mut dx = vec![F::zero(); grad.len()];
            let count = F::lit((n * s) as f64);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * s;
                    let scale = gamma[ch] * self.inv_std[ch];
                    for k in base..base + s {
                        dx[k] = if self.batch_stats {
                            // dβ and dγ are exactly Σ dy and Σ dy·x̂ per channel.
                            scale * (grad[k] - dbeta[ch] / count - self.xhat[k] * dgamma[ch] / count)
                        } else {
                            scale * grad[k]
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            ctx.requires_grad(self.gamma).then_some(dgamma),
            ctx.requires_grad(self.beta).then_some(dbeta),
        ]
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 − rate)`.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self { rate })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        if ctx.mode == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - self.rate));
        let n = ctx.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if ctx.rng.uniform() < self.rate { F::zero() } else { keep })
            .collect();
        ctx.tape.mul_const(x, mask)
    }
}
