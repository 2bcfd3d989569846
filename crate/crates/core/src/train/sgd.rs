//! Stochastic gradient descent with classic momentum:
//! `v ← μ·v + g`, `p ← p − lr·v`.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// One update of every tensor in place.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    velocity: &mut [Tensor<S>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(
            "sgd step",
            format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    let (lr, mu) = (S::lit(lr), S::lit(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Optimizer state for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(params: &ParamStore<S>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    /// `grads` are in store order.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        sgd_momentum_step(params.tensors_mut(), grads, &mut self.velocity, lr, self.momentum)
    }
}
