use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamKind, ParamStore, Real, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over every axis except axis 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub prefix: String,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNormLayer { prefix: prefix.into(), channels, momentum: BN_MOMENTUM, epsilon: BN_EPSILON }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.prefix)
    }
    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.prefix)
    }
    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.prefix)
    }
    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.prefix)
    }

    pub fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, _rng: &mut R) {
        let c = [self.channels];
        store.insert(self.gamma_name(), Tensor::ones(c), ParamKind::NormScale);
        store.insert(self.beta_name(), Tensor::zeros(c), ParamKind::NormShift);
        store.insert(self.running_mean_name(), Tensor::zeros(c), ParamKind::RunningMean);
        store.insert(self.running_var_name(), Tensor::ones(c), ParamKind::RunningVar);
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::invalid(
                "batchnorm",
                format!("{} expects {} channels, got shape {shape:?}", self.prefix, self.channels),
            ));
        }
        let gamma = g.param(store, &self.gamma_name())?;
        let beta = g.param(store, &self.beta_name())?;
        match mode {
            Mode::Train => {
                let (y, mean, var_unbiased) = batch_norm_train(g, x, gamma, beta, self.epsilon)?;
                let m = self.momentum;
                let rm = store.get_mut(&self.running_mean_name())?;
                for (r, &b) in rm.value.data_mut().iter_mut().zip(&mean) {
                    *r = S::cast_from((1.0 - m) * r.as_f64() + m * b);
                }
                let rv = store.get_mut(&self.running_var_name())?;
                for (r, &b) in rv.value.data_mut().iter_mut().zip(&var_unbiased) {
                    *r = S::cast_from((1.0 - m) * r.as_f64() + m * b);
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.value(&self.running_mean_name())?.to_f64_vec();
                let rv = store.value(&self.running_var_name())?.to_f64_vec();
                batch_norm_eval(g, x, gamma, beta, &rm, &rv, self.epsilon)
            }
        }
    }
}

struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn of(shape: &[usize]) -> Self {
        Layout { outer: shape[0], channels: shape[1], inner: shape[2..].iter().product() }
    }

    fn population(&self) -> usize {
        self.outer * self.inner
    }

    /// Calls `f(channel, range)` for every contiguous per-channel run.
    fn for_each_run(&self, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
        for o in 0..self.outer {
            for c in 0..self.channels {
                let start = (o * self.channels + c) * self.inner;
                f(c, start..start + self.inner);
            }
        }
    }
}

/// Normalizes with batch statistics; returns the output together with the
/// batch mean and unbiased batch variance per channel.
fn batch_norm_train<S: Real>(
    g: &mut Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let shape = g.shape(x).to_vec();
    let l = Layout::of(&shape);
    let n = l.population();
    if n < 2 {
        return Err(Error::invalid(
            "batchnorm",
            format!("train mode needs at least 2 values per channel, got shape {shape:?}"),
        ));
    }
    let xd = g.value(x).data();
    let mut sum = vec![0.0f64; l.channels];
    l.for_each_run(|c, r| sum[c] += xd[r].iter().map(|v| v.as_f64()).sum::<f64>());
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0f64; l.channels];
    l.for_each_run(|c, r| {
        let m = mean[c];
        sq[c] += xd[r].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
    });
    let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gd = g.value(gamma).to_f64_vec();
    let bd = g.value(beta).to_f64_vec();
    let mut xhat = vec![S::zero(); xd.len()];
    let mut out = vec![S::zero(); xd.len()];
    l.for_each_run(|c, r| {
        let (m, is, ga, be) = (mean[c], inv_std[c], gd[c], bd[c]);
        for i in r {
            let h = (xd[i].as_f64() - m) * is;
            xhat[i] = S::cast_from(h);
            out[i] = S::cast_from(ga * h + be);
        }
    });
    let value = Tensor::new(shape.clone(), out)?;
    let inv = inv_std.clone();
    let y = g.record(
        value,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let l = Layout::of(&shape);
            let n = l.population() as f64;
            let gy = ctx.grad.data();
            let gamma = ctx.inputs[1].to_f64_vec();
            let mut sum_g = vec![0.0f64; l.channels];
            let mut sum_gx = vec![0.0f64; l.channels];
            l.for_each_run(|c, r| {
                for i in r {
                    let gi = gy[i].as_f64();
                    sum_g[c] += gi;
                    sum_gx[c] += gi * xhat[i].as_f64();
                }
            });
            let gx = ctx.needs[0].then(|| {
                let mut d = vec![S::zero(); gy.len()];
                l.for_each_run(|c, r| {
                    let scale = gamma[c] * inv[c];
                    let (mg, mgx) = (sum_g[c] / n, sum_gx[c] / n);
                    for i in r {
                        d[i] = S::cast_from(scale * (gy[i].as_f64() - mg - xhat[i].as_f64() * mgx));
                    }
                });
                Tensor::new(shape.clone(), d).unwrap()
            });
            let ggamma = ctx.needs[1].then(|| Tensor::from_f64([l.channels], &sum_gx).unwrap());
            let gbeta = ctx.needs[2].then(|| Tensor::from_f64([l.channels], &sum_g).unwrap());
            vec![gx, ggamma, gbeta]
        }),
    );
    let unbiased: Vec<f64> = sq.iter().map(|s| s / (n - 1) as f64).collect();
    Ok((y, mean, unbiased))
}

fn batch_norm_eval<S: Real>(
    g: &mut Graph<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let l = Layout::of(&shape);
    let xd = g.value(x).data();
    let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gd = g.value(gamma).to_f64_vec();
    let bd = g.value(beta).to_f64_vec();
    let mut out = vec![S::zero(); xd.len()];
    l.for_each_run(|c, r| {
        let (m, is, ga, be) = (running_mean[c], inv[c], gd[c], bd[c]);
        for i in r {
            out[i] = S::cast_from(ga * (xd[i].as_f64() - m) * is + be);
        }
    });
    let value = Tensor::new(shape.clone(), out)?;
    let rm = running_mean.to_vec();
    Ok(g.record(
        value,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let l = Layout::of(&shape);
            let gy = ctx.grad.data();
            let xd = ctx.inputs[0].data();
            let gamma = ctx.inputs[1].to_f64_vec();
            let gx = ctx.needs[0].then(|| {
                let mut d = vec![S::zero(); gy.len()];
                l.for_each_run(|c, r| {
                    let scale = gamma[c] * inv[c];
                    for i in r {
                        d[i] = S::cast_from(gy[i].as_f64() * scale);
                    }
                });
                Tensor::new(shape.clone(), d).unwrap()
            });
            let mut sum_g = vec![0.0f64; l.channels];
            let mut sum_gx = vec![0.0f64; l.channels];
            l.for_each_run(|c, r| {
                for i in r {
                    let gi = gy[i].as_f64();
                    sum_g[c] += gi;
                    sum_gx[c] += gi * (xd[i].as_f64() - rm[c]) * inv[c];
                }
            });
            let ggamma = ctx.needs[1].then(|| Tensor::from_f64([l.channels], &sum_gx).unwrap());
            let gbeta = ctx.needs[2].then(|| Tensor::from_f64([l.channels], &sum_g).unwrap());
            vec![gx, ggamma, gbeta]
        }),
    ))
}
