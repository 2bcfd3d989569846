//! A built network: an [`ArchSpec`] plus its parameters and running
//! statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchSpec, ConvKind, LayerSpec};
use crate::autograd::{Graph, Var};
use crate::blocks::{conv_unit, inception_block, inception_buffers, inception_params, unit_buffers, unit_params, BlockCtx, InceptionConfig, Mode, UnitConfig};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, ConvOpts, RunningStats, BN_EPSILON};
use crate::params::{Init, ParamDecl, ParamStore};
use crate::tensor::{video_dims, Scalar, Tensor};

/// Classifier weights start at `N(0, HEAD_INIT_STD² / C)`.
pub const HEAD_INIT_STD: f64 = 0.1;

/// Unit geometry of a conv layer given its input channels.
pub fn conv_layer_unit(l: &crate::arch::ConvLayer, c_in: usize) -> UnitConfig {
    UnitConfig::new(l.kind, l.kernel, c_in, l.out).with_stride(l.stride).with_gate(l.gated)
}

pub fn inception_layer_config(l: &crate::arch::InceptionLayer, c_in: usize) -> InceptionConfig {
    InceptionConfig {
        c_in,
        widths: l.widths,
        kind: l.kind,
        temporal_kernel: l.temporal_kernel,
        gated: l.gated,
    }
}

/// Trainable tensors and running-statistics buffers of a spec.
pub fn declarations(spec: &ArchSpec) -> Result<(Vec<ParamDecl>, Vec<ParamDecl>)> {
    let geo = spec.geometry()?;
    let bn = &spec.batch_norm;
    let (mut params, mut buffers) = (Vec::new(), Vec::new());
    for (layer, g) in spec.layers.iter().zip(&geo) {
        let c_in = g.input[3];
        match layer {
            LayerSpec::Conv(l) => {
                let unit = conv_layer_unit(l, c_in);
                unit_params(&l.name, &unit, bn, &mut params);
                unit_buffers(&l.name, &unit, bn, &mut buffers);
            }
            LayerSpec::Inception(l) => {
                let cfg = inception_layer_config(l, c_in);
                inception_params(&l.name, &cfg, bn, &mut params);
                inception_buffers(&l.name, &cfg, bn, &mut buffers);
            }
            LayerSpec::Head(h) => {
                // Small logits so the initial softmax is close to uniform.
                let std = HEAD_INIT_STD / (c_in as f64).sqrt();
                params.push(ParamDecl::new(format!("{}/w", h.name), vec![1, 1, 1, c_in, spec.classes], Init::Normal { std }));
                params.push(ParamDecl::new(format!("{}/b", h.name), vec![spec.classes], Init::Zeros));
            }
            LayerSpec::MaxPool(_) => {}
        }
    }
    Ok((params, buffers))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Parameters become gradient-carrying leaves.
    pub trainable: bool,
    /// Enables head dropout (train mode only).
    pub dropout_seed: Option<u64>,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            trainable: false,
            dropout_seed: None,
        }
    }

    pub fn train(dropout_seed: Option<u64>) -> Self {
        Self {
            mode: Mode::Train,
            trainable: true,
            dropout_seed,
        }
    }
}

/// A recorded forward pass.
pub struct ForwardPass<'a, S: Scalar> {
    pub ctx: BlockCtx<'a, S>,
    /// `[N, classes]`.
    pub logits: Var,
    /// Output of every layer, in order.
    pub trace: Vec<(String, Var)>,
}

impl<S: Scalar> ForwardPass<'_, S> {
    pub fn graph(&self) -> &Graph<S> {
        &self.ctx.graph
    }

    pub fn logits(&self) -> &Tensor<S> {
        self.ctx.graph.value(self.logits)
    }

    pub fn layer(&self, name: &str) -> Option<&Tensor<S>> {
        self.trace.iter().find(|(n, _)| n == name).map(|&(_, v)| self.ctx.graph.value(v))
    }

    /// First layer whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.trace
            .iter()
            .find(|(_, v)| !self.ctx.graph.value(*v).all_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Mean cross-entropy loss and gradients for every network parameter,
    /// in store order (zeros for parameters the pass did not touch).
    pub fn loss_and_grads(&mut self, labels: &[usize], params: &ParamStore<S>) -> Result<(S, Vec<Tensor<S>>)> {
        let loss = self.ctx.graph.cross_entropy(self.logits, labels)?;
        let value = self.ctx.graph.value(loss).item();
        let mut grads = self.ctx.graph.backward(loss)?;
        let out = params
            .iter()
            .map(|(name, t)| {
                self.ctx
                    .param_var(name)
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        Ok((value, out))
    }

    pub fn into_bn_stats(self) -> Vec<(String, BatchStats<S>)> {
        self.ctx.bn_stats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<S: Scalar> {
    spec: ArchSpec,
    params: ParamStore<S>,
    buffers: ParamStore<S>,
}

impl<S: Scalar> Network<S> {
    /// Freshly initialized network; identical seeds give identical weights.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        let (pdecl, bdecl) = declarations(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for d in &pdecl {
            params.insert(d.name.clone(), d.materialize(&mut rng))?;
        }
        let mut buffers = ParamStore::new();
        for d in &bdecl {
            buffers.insert(d.name.clone(), d.materialize(&mut rng))?;
        }
        Ok(Self { spec, params, buffers })
    }

    /// Assembles a network from stored tensors, checking names and shapes.
    pub fn from_parts(spec: ArchSpec, params: ParamStore<S>, buffers: ParamStore<S>) -> Result<Self> {
        let (pdecl, bdecl) = declarations(&spec)?;
        for (decls, store, what) in [(&pdecl, &params, "parameter"), (&bdecl, &buffers, "buffer")] {
            if decls.len() != store.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {what} tensors for this architecture, found {}",
                    decls.len(),
                    store.len()
                )));
            }
            for d in decls {
                let t = store.get(&d.name).map_err(|_| Error::Checkpoint(format!("missing {what} `{}`", d.name)))?;
                if t.shape() != d.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "{what} `{}` has shape {:?}, architecture needs {:?}",
                        d.name,
                        t.shape(),
                        d.shape
                    )));
                }
            }
        }
        Ok(Self { spec, params, buffers })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<S> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    /// Runs the network on `x: [N, T, H, W, C]`.
    pub fn forward(&self, x: &Tensor<S>, opts: ForwardOpts) -> Result<ForwardPass<'_, S>> {
        let [_, t, h, w, c] = video_dims(x.shape(), "network input")?;
        let g = self.spec.input;
        if [t, h, w, c] != [g.frames, g.height, g.width, g.channels] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: g.shape(x.shape()[0]),
                rhs: x.shape().to_vec(),
            });
        }
        let geo = self.spec.geometry()?;
        let mut ctx = BlockCtx::new(&self.params, &self.buffers, self.spec.batch_norm, opts.mode, opts.trainable)
            .with_time_border(self.spec.temporal_padding);
        let mut cur = ctx.graph.constant(x.clone());
        let mut trace = Vec::with_capacity(self.spec.layers.len());
        let mut rng = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        for (layer, lg) in self.spec.layers.iter().zip(&geo) {
            let c_in = lg.input[3];
            cur = match layer {
                LayerSpec::Conv(l) => conv_unit(&mut ctx, &l.name, cur, &conv_layer_unit(l, c_in))?,
                LayerSpec::MaxPool(l) => ctx.graph.maxpool3d(cur, &crate::ops::PoolOpts::new(l.window, l.stride))?,
                LayerSpec::Inception(l) => inception_block(&mut ctx, &l.name, cur, &inception_layer_config(l, c_in))?,
                LayerSpec::Head(hd) => {
                    let mut y = ctx.graph.reduce_mean(cur, &[2, 3])?;
                    if let (Mode::Train, Some(rng)) = (opts.mode, rng.as_mut()) {
                        y = ctx.graph.dropout(y, hd.dropout, rng)?;
                    }
                    let w = ctx.param(&format!("{}/w", hd.name))?;
                    let b = ctx.param(&format!("{}/b", hd.name))?;
                    let y = ctx.graph.conv3d(y, w, Some(b), &ConvOpts::default())?;
                    let y = ctx.graph.reduce_mean(y, &[1])?;
                    let n = ctx.graph.shape(y)[0];
                    ctx.graph.reshape(y, &[n, self.spec.classes])?
                }
            };
            trace.push((layer.name().to_string(), cur));
        }
        Ok(ForwardPass { ctx, logits: cur, trace })
    }

    /// Eval-mode logits without gradient bookkeeping.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(x, ForwardOpts::eval())?.logits().clone())
    }

    /// Eval-mode output of every layer.
    pub fn layer_outputs(&self, x: &Tensor<S>) -> Result<Vec<(String, Tensor<S>)>> {
        let pass = self.forward(x, ForwardOpts::eval())?;
        Ok(pass.trace.iter().map(|(n, v)| (n.clone(), pass.ctx.graph.value(*v).clone())).collect())
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<S>)]) -> Result<()> {
        for (key, batch) in stats {
            let mut run = RunningStats {
                mean: self.buffers.get(&format!("{key}_mean"))?.clone(),
                var: self.buffers.get(&format!("{key}_var"))?.clone(),
            };
            run.update(batch);
            self.buffers.set(&format!("{key}_mean"), run.mean)?;
            self.buffers.set(&format!("{key}_var"), run.var)?;
        }
        Ok(())
    }

    /// Loads weights from a network whose units are 2D (or already match),
    /// inflating each `1×k×k` filter to this network's `kt×k×k` by
    /// repeating it over time divided by `kt`. Temporal factors of
    /// separable units start as identity; their batch norms start as
    /// identity in eval mode.
    pub fn inflate_from(&mut self, source: &Network<S>) -> Result<()> {
        for i in 0..self.params.len() {
            let name = self.params.names()[i].clone();
            let target_shape = self.params.tensors()[i].shape().to_vec();
            let new = match source.params.get(&name) {
                Ok(src) if src.shape() == target_shape.as_slice() => src.clone(),
                Ok(src) if name.ends_with("/w") => inflate_filter(src, target_shape[0])?,
                Ok(src) => {
                    return Err(Error::ShapeMismatch {
                        op: "inflate",
                        lhs: src.shape().to_vec(),
                        rhs: target_shape,
                    })
                }
                Err(_) if name.ends_with("/t_w") => temporal_identity(&target_shape)?,
                Err(_) if is_temporal_extra(&name) => self.params.tensors()[i].clone(),
                Err(_) => return Err(Error::invalid("inflate", format!("source network has no tensor `{name}`"))),
            };
            self.params.tensors_mut()[i] = new;
        }
        let identity_var = S::lit(1.0 - BN_EPSILON);
        for i in 0..self.buffers.len() {
            let name = self.buffers.names()[i].clone();
            let shape = self.buffers.tensors()[i].shape().to_vec();
            let new = match source.buffers.get(&name) {
                Ok(src) if src.shape() == shape.as_slice() => src.clone(),
                Ok(src) => {
                    return Err(Error::ShapeMismatch {
                        op: "inflate",
                        lhs: src.shape().to_vec(),
                        rhs: shape,
                    })
                }
                Err(_) if name.ends_with("t_bn_mean") => Tensor::zeros(shape),
                Err(_) if name.ends_with("t_bn_var") => Tensor::full(shape, identity_var),
                Err(_) => return Err(Error::invalid("inflate", format!("source network has no buffer `{name}`"))),
            };
            self.buffers.tensors_mut()[i] = new;
        }
        Ok(())
    }

    /// Weight tensors that carry a temporal kernel, keyed by surgery unit.
    pub fn temporal_kernels(&self) -> Vec<(String, Vec<&Tensor<S>>)> {
        let mut out = Vec::new();
        for layer in &self.spec.layers {
            let (Some(_), Some(kind)) = (layer.surgery(), layer.kind()) else { continue };
            let suffix = match kind {
                ConvKind::Conv2d => continue,
                ConvKind::Conv3d => "/w",
                ConvKind::Sep => "/t_w",
            };
            let prefix = format!("{}/", layer.name());
            let tensors: Vec<&Tensor<S>> = self
                .params
                .iter()
                .filter(|(n, t)| n.starts_with(&prefix) && n.ends_with(suffix) && t.shape()[0] > 1)
                .map(|(_, t)| t)
                .collect();
            if !tensors.is_empty() {
                out.push((layer.name().to_string(), tensors));
            }
        }
        out
    }
}

fn is_temporal_extra(name: &str) -> bool {
    ["/t_b", "/t_bn_beta", "/t_bn_gamma", "/gate_w", "/gate_b"].iter().any(|s| name.ends_with(s))
}

/// Repeats a `[1, kh, kw, c_in, c_out]` filter `kt` times, divided by `kt`.
pub fn inflate_filter<S: Scalar>(w2d: &Tensor<S>, kt: usize) -> Result<Tensor<S>> {
    let s = w2d.shape();
    if s.len() != 5 || s[0] != 1 || kt == 0 {
        return Err(Error::invalid("inflate", format!("expected a [1, kh, kw, c_in, c_out] filter and kt >= 1, got {s:?} and kt = {kt}")));
    }
    let kt_s = S::lit(kt as f64);
    let slice: Vec<S> = w2d.data().iter().map(|&v| v / kt_s).collect();
    let mut data = Vec::with_capacity(slice.len() * kt);
    for _ in 0..kt {
        data.extend_from_slice(&slice);
    }
    let mut shape = s.to_vec();
    shape[0] = kt;
    Tensor::new(shape, data)
}

/// `[kt, 1, 1, c, c]` with `W[t, :, :, i, j] = δ_ij / kt`.
fn temporal_identity<S: Scalar>(shape: &[usize]) -> Result<Tensor<S>> {
    let [kt, 1, 1, ci, co] = shape[..] else {
        return Err(Error::invalid("inflate", format!("temporal filter shape {shape:?}")));
    };
    if ci != co {
        return Err(Error::invalid("inflate", format!("temporal filter {shape:?} is not channel-preserving")));
    }
    let v = S::one() / S::lit(kt as f64);
    Ok(Tensor::from_fn(shape.to_vec(), |i| {
        let (r, c) = ((i / co) % ci, i % co);
        if r == c {
            v
        } else {
            S::zero()
        }
    }))
}
