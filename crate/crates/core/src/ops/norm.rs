//! Batch normalization over the channel axis of channels-last tensors.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
/// Weight of the old running value in each update.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel statistics of one training batch. `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> RunningStats<S> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }

    pub fn update(&mut self, batch: &BatchStats<S>) {
        let m = S::lit(BN_MOMENTUM);
        let r = S::one() - m;
        for (run, b) in [(&mut self.mean, &batch.mean), (&mut self.var, &batch.var)] {
            for (v, &x) in run.data_mut().iter_mut().zip(b.data()) {
                *v = m * *v + r * x;
            }
        }
    }
}

pub enum BnMode<'a, S> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval(&'a RunningStats<S>),
}

impl<S: Scalar> Graph<S> {
    /// Normalizes each channel over every other axis. `gamma` defaults to 1
    /// and `beta` to 0 when absent. Train mode also returns the batch
    /// statistics so the caller can fold them into its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BnMode<'_, S>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("batchnorm", "scalar input"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let m = xd.len() / c;
        if m == 0 {
            return Err(Error::invalid("batchnorm", "empty input"));
        }
        let eps = S::lit(BN_EPSILON);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![S::zero(); c];
                for row in xd.chunks(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let inv_m = S::one() / S::lit(m as f64);
                mean.iter_mut().for_each(|v| *v *= inv_m);
                let mut var = vec![S::zero(); c];
                for row in xd.chunks(c) {
                    for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                let biased: Vec<S> = var.iter().map(|&v| v * inv_m).collect();
                let unbiased_scale = if m > 1 { S::one() / S::lit((m - 1) as f64) } else { inv_m };
                let stats = BatchStats {
                    mean: Tensor::new(vec![c], mean.clone())?,
                    var: Tensor::new(vec![c], var.iter().map(|&v| v * unbiased_scale).collect())?,
                };
                (mean, biased, Some(stats))
            }
            BnMode::Eval(run) => {
                if run.mean.shape() != [c] || run.var.shape() != [c] {
                    return Err(Error::ShapeMismatch {
                        op: "batchnorm running stats",
                        lhs: vec![c],
                        rhs: run.mean.shape().to_vec(),
                    });
                }
                (run.mean.data().to_vec(), run.var.data().to_vec(), None)
            }
        };
        let train = stats.is_some();
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = gamma.map(|g| self.value(g).data().to_vec()).unwrap_or_else(|| vec![S::one(); c]);
        let b = beta.map(|b| self.value(b).data().to_vec()).unwrap_or_else(|| vec![S::zero(); c]);
        let mut xhat = vec![S::zero(); xd.len()];
        let mut y = vec![S::zero(); xd.len()];
        for ((xr, hr), yr) in xd.chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
            for j in 0..c {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
                yr[j] = g[j] * hr[j] + b[j];
            }
        }
        let value = Tensor::new(shape, y)?;
        let mut parents = vec![x];
        let has_gamma = gamma.is_some();
        parents.extend(gamma);
        parents.extend(beta);
        let var_out = self.record(
            value,
            &parents,
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut out = Vec::with_capacity(ctx.inputs.len());
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gh = vec![S::zero(); c];
                for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gh[j] += gr[j] * hr[j];
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![S::zero(); gd.len()];
                    let inv_m = S::one() / S::lit(m as f64);
                    for ((dr, gr), hr) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let scale = g[j] * inv_std[j];
                            dr[j] = if train {
                                scale * (gr[j] - inv_m * sum_g[j] - hr[j] * inv_m * sum_gh[j])
                            } else {
                                scale * gr[j]
                            };
                        }
                    }
                    Tensor::new(ctx.inputs[0].shape().to_vec(), dx).unwrap()
                });
                out.push(dx);
                let mut i = 1;
                if has_gamma {
                    out.push(ctx.needs[i].then(|| Tensor::new(vec![c], sum_gh.clone()).unwrap()));
                    i += 1;
                }
                if i < ctx.inputs.len() {
                    out.push(ctx.needs[i].then(|| Tensor::new(vec![c], sum_g.clone()).unwrap()));
                }
                out
            }),
        );
        Ok((var_out, stats))
    }
}
