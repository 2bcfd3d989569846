//! Convolution units, Inception blocks and feature gating.
//!
//! A unit is conv, batch norm and ReLU. Its kind decides the filters:
//!
//! | kind | filters                                              |
//! |------|------------------------------------------------------|
//! | 2d   | `w: 1×kh×kw`                                         |
//! | 3d   | `w: kt×kh×kw`                                        |
//! | sep  | `w: 1×kh×kw`, BN, ReLU, `t_w: kt×1×1`, optional gate |
//!
//! Tensor names are `prefix/w`, `prefix/bn_beta`, `prefix/t_w`,
//! `prefix/gate_w` and so on, shared across kinds so that weights map
//! between a 2D network and its inflated 3D counterpart by name.

use std::collections::HashMap;

use crate::arch::{effective_kernel, BatchNormConfig, ConvKind, InceptionWidths};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, BnMode, ConvOpts, PoolOpts, RunningStats, TimeBorder};
use crate::params::{Init, ParamDecl, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Geometry of one convolution unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitConfig {
    pub kind: ConvKind,
    /// Full kernel before the kind is applied.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    pub gated: bool,
}

impl UnitConfig {
    pub fn new(kind: ConvKind, kernel: [usize; 3], c_in: usize, c_out: usize) -> Self {
        Self {
            kind,
            kernel,
            stride: [1, 1, 1],
            c_in,
            c_out,
            gated: false,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_gate(mut self, gated: bool) -> Self {
        self.gated = gated;
        self
    }

    /// Shape of `prefix/w`.
    pub fn main_shape(&self) -> [usize; 5] {
        let k = match self.kind {
            ConvKind::Sep => [1, self.kernel[1], self.kernel[2]],
            kind => effective_kernel(kind, self.kernel),
        };
        [k[0], k[1], k[2], self.c_in, self.c_out]
    }

    pub fn main_stride(&self) -> [usize; 3] {
        match self.kind {
            ConvKind::Sep => [1, self.stride[1], self.stride[2]],
            _ => self.stride,
        }
    }

    /// Shape of `prefix/t_w` for separable units.
    pub fn temporal_shape(&self) -> Option<[usize; 5]> {
        (self.kind == ConvKind::Sep).then_some([self.kernel[0], 1, 1, self.c_out, self.c_out])
    }
}

fn bn_decls(prefix: &str, tag: &str, c: usize, bn: &BatchNormConfig, out: &mut Vec<ParamDecl>) {
    if bn.enabled {
        if bn.scale {
            out.push(ParamDecl::new(format!("{prefix}/{tag}_gamma"), vec![c], Init::Ones));
        }
        out.push(ParamDecl::new(format!("{prefix}/{tag}_beta"), vec![c], Init::Zeros));
    }
}

fn bias_name(tag: &str) -> &'static str {
    if tag == "bn" {
        "b"
    } else {
        "t_b"
    }
}

/// Trainable tensors of a unit, in a fixed order.
pub fn unit_params(prefix: &str, cfg: &UnitConfig, bn: &BatchNormConfig, out: &mut Vec<ParamDecl>) {
    let w = cfg.main_shape();
    out.push(ParamDecl::new(format!("{prefix}/w"), w.to_vec(), Init::He { fan_in: w[..4].iter().product() }));
    if !bn.enabled {
        out.push(ParamDecl::new(format!("{prefix}/b"), vec![cfg.c_out], Init::Zeros));
    }
    bn_decls(prefix, "bn", cfg.c_out, bn, out);
    if let Some(t) = cfg.temporal_shape() {
        out.push(ParamDecl::new(format!("{prefix}/t_w"), t.to_vec(), Init::He { fan_in: t[0] * t[3] }));
        if !bn.enabled {
            out.push(ParamDecl::new(format!("{prefix}/t_b"), vec![cfg.c_out], Init::Zeros));
        }
        bn_decls(prefix, "t_bn", cfg.c_out, bn, out);
        if cfg.gated {
            out.extend(gate_params(prefix, cfg.c_out));
        }
    }
}

/// Running batch-norm statistics of a unit.
pub fn unit_buffers(prefix: &str, cfg: &UnitConfig, bn: &BatchNormConfig, out: &mut Vec<ParamDecl>) {
    if !bn.enabled {
        return;
    }
    let mut tags = vec!["bn"];
    if cfg.kind == ConvKind::Sep {
        tags.push("t_bn");
    }
    for tag in tags {
        out.push(ParamDecl::new(format!("{prefix}/{tag}_mean"), vec![cfg.c_out], Init::Zeros));
        out.push(ParamDecl::new(format!("{prefix}/{tag}_var"), vec![cfg.c_out], Init::Ones));
    }
}

/// `W = 0`, `b = 0`: every gate starts at 0.5.
pub fn gate_params(prefix: &str, c: usize) -> [ParamDecl; 2] {
    [
        ParamDecl::new(format!("{prefix}/gate_w"), vec![c, c], Init::Zeros),
        ParamDecl::new(format!("{prefix}/gate_b"), vec![c], Init::Zeros),
    ]
}

/// One Inception block: widths, input channels and treatment of time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InceptionConfig {
    pub c_in: usize,
    pub widths: InceptionWidths,
    pub kind: ConvKind,
    pub temporal_kernel: usize,
    pub gated: bool,
}

impl InceptionConfig {
    pub fn new(c_in: usize, widths: InceptionWidths, kind: ConvKind) -> Self {
        Self {
            c_in,
            widths,
            kind,
            temporal_kernel: 3,
            gated: false,
        }
    }

    pub fn out(&self) -> usize {
        self.widths.out()
    }

    /// The six units in branch order: `b0`, `b1a`, `b1b`, `b2a`, `b2b`, `b3`.
    pub fn units(&self) -> [(&'static str, UnitConfig); 6] {
        let w = &self.widths;
        let kt = self.temporal_kernel;
        let gated = self.gated && self.kind == ConvKind::Sep;
        // Separable blocks add a temporal conv to the 1×1 and pool branches too.
        let pointwise = |c_in, c_out| match self.kind {
            ConvKind::Sep => UnitConfig::new(ConvKind::Sep, [kt, 1, 1], c_in, c_out).with_gate(gated),
            _ => UnitConfig::new(ConvKind::Conv2d, [1, 1, 1], c_in, c_out),
        };
        let reduce = |c_out| UnitConfig::new(ConvKind::Conv2d, [1, 1, 1], self.c_in, c_out);
        let spatial = |c_in, c_out| UnitConfig::new(self.kind, [kt, 3, 3], c_in, c_out).with_gate(gated);
        [
            ("b0", pointwise(self.c_in, w.b0)),
            ("b1a", reduce(w.b1_reduce)),
            ("b1b", spatial(w.b1_reduce, w.b1)),
            ("b2a", reduce(w.b2_reduce)),
            ("b2b", spatial(w.b2_reduce, w.b2)),
            ("b3", pointwise(self.c_in, w.b3)),
        ]
    }

    /// Pool of branch `b3`: `kt×3×3` for 3D blocks, `1×3×3` otherwise.
    pub fn pool(&self) -> PoolOpts {
        let t = if self.kind == ConvKind::Conv3d { self.temporal_kernel } else { 1 };
        PoolOpts::new([t, 3, 3], [1, 1, 1])
    }
}

pub fn inception_params(prefix: &str, cfg: &InceptionConfig, bn: &BatchNormConfig, out: &mut Vec<ParamDecl>) {
    for (branch, unit) in cfg.units() {
        unit_params(&format!("{prefix}/{branch}"), &unit, bn, out);
    }
}

pub fn inception_buffers(prefix: &str, cfg: &InceptionConfig, bn: &BatchNormConfig, out: &mut Vec<ParamDecl>) {
    for (branch, unit) in cfg.units() {
        unit_buffers(&format!("{prefix}/{branch}"), &unit, bn, out);
    }
}

/// Whether a forward pass normalizes with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph plus named parameter access for one forward pass.
pub struct BlockCtx<'a, S: Scalar> {
    pub graph: Graph<S>,
    params: &'a ParamStore<S>,
    buffers: &'a ParamStore<S>,
    vars: HashMap<String, Var>,
    order: Vec<String>,
    pub bn: BatchNormConfig,
    pub mode: Mode,
    /// Whether parameters receive gradients.
    pub trainable: bool,
    pub time_border: TimeBorder,
    /// Batch statistics by buffer prefix, in evaluation order.
    pub bn_stats: Vec<(String, BatchStats<S>)>,
}

impl<'a, S: Scalar> BlockCtx<'a, S> {
    pub fn new(params: &'a ParamStore<S>, buffers: &'a ParamStore<S>, bn: BatchNormConfig, mode: Mode, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            buffers,
            vars: HashMap::new(),
            order: Vec::new(),
            bn,
            mode,
            trainable,
            time_border: TimeBorder::Replicate,
            bn_stats: Vec::new(),
        }
    }

    pub fn with_time_border(mut self, border: TimeBorder) -> Self {
        self.time_border = border;
        self
    }

    /// Graph leaf for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.graph.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    fn param_checked(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let v = self.param(name)?;
        if self.graph.shape(v) != shape {
            return Err(Error::ShapeMismatch {
                op: "parameter shape",
                lhs: shape.to_vec(),
                rhs: self.graph.shape(v).to_vec(),
            });
        }
        Ok(v)
    }

    /// Parameters touched so far, in first-use order.
    pub fn used_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|n| (n.as_str(), self.vars[n]))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    fn running(&self, prefix: &str) -> Result<RunningStats<S>> {
        Ok(RunningStats {
            mean: self.buffers.get(&format!("{prefix}_mean"))?.clone(),
            var: self.buffers.get(&format!("{prefix}_var"))?.clone(),
        })
    }

    /// BN (or bias) followed by ReLU.
    fn norm_relu(&mut self, prefix: &str, tag: &str, x: Var) -> Result<Var> {
        let y = if self.bn.enabled {
            let gamma = if self.bn.scale { Some(self.param(&format!("{prefix}/{tag}_gamma"))?) } else { None };
            let beta = Some(self.param(&format!("{prefix}/{tag}_beta"))?);
            let key = format!("{prefix}/{tag}");
            match self.mode {
                Mode::Train => {
                    let (y, stats) = self.graph.batchnorm(x, gamma, beta, BnMode::Train)?;
                    self.bn_stats.push((key, stats.expect("train mode yields statistics")));
                    y
                }
                Mode::Eval => {
                    let run = self.running(&key)?;
                    self.graph.batchnorm(x, gamma, beta, BnMode::Eval(&run))?.0
                }
            }
        } else {
            x
        };
        Ok(self.graph.relu(y))
    }

    fn conv(&mut self, prefix: &str, x: Var, w_name: &str, shape: [usize; 5], stride: [usize; 3], bias: &str) -> Result<Var> {
        let w = self.param_checked(&format!("{prefix}/{w_name}"), &shape)?;
        let b = if self.bn.enabled { None } else { Some(self.param(&format!("{prefix}/{bias}"))?) };
        let opts = ConvOpts::stride(stride).with_time_border(self.time_border);
        self.graph.conv3d(x, w, b, &opts)
    }
}

/// Conv, BN, ReLU; separable units add the temporal conv, BN, ReLU and
/// optional gate.
pub fn conv_unit<S: Scalar>(ctx: &mut BlockCtx<'_, S>, prefix: &str, x: Var, cfg: &UnitConfig) -> Result<Var> {
    let c = *ctx.graph.shape(x).last().unwrap_or(&0);
    if c != cfg.c_in {
        return Err(Error::invalid(
            "conv unit",
            format!("`{prefix}` expects {} input channels, got {c}", cfg.c_in),
        ));
    }
    let y = ctx.conv(prefix, x, "w", cfg.main_shape(), cfg.main_stride(), bias_name("bn"))?;
    let mut y = ctx.norm_relu(prefix, "bn", y)?;
    if let Some(t) = cfg.temporal_shape() {
        let z = ctx.conv(prefix, y, "t_w", t, [cfg.stride[0], 1, 1], bias_name("t_bn"))?;
        y = ctx.norm_relu(prefix, "t_bn", z)?;
        if cfg.gated {
            let w = ctx.param(&format!("{prefix}/gate_w"))?;
            let b = ctx.param(&format!("{prefix}/gate_b"))?;
            y = ctx.graph.feature_gate(y, w, b)?;
        }
    }
    Ok(y)
}

/// Four-branch block concatenated along channels in branch order. The
/// k×k branches use the block's kind; see [`InceptionConfig::units`].
pub fn inception_block<S: Scalar>(ctx: &mut BlockCtx<'_, S>, prefix: &str, x: Var, cfg: &InceptionConfig) -> Result<Var> {
    let c = *ctx.graph.shape(x).last().unwrap_or(&0);
    if c != cfg.c_in {
        return Err(Error::invalid(
            "inception block",
            format!("branch b0 of `{prefix}` expects {} input channels, got {c}", cfg.c_in),
        ));
    }
    let [b0, b1a, b1b, b2a, b2b, b3] = cfg.units();
    let name = |(branch, _): &(&str, UnitConfig)| format!("{prefix}/{branch}");
    let y0 = conv_unit(ctx, &name(&b0), x, &b0.1)?;
    let r1 = conv_unit(ctx, &name(&b1a), x, &b1a.1)?;
    let y1 = conv_unit(ctx, &name(&b1b), r1, &b1b.1)?;
    let r2 = conv_unit(ctx, &name(&b2a), x, &b2a.1)?;
    let y2 = conv_unit(ctx, &name(&b2b), r2, &b2b.1)?;
    let p = ctx.graph.maxpool3d(x, &cfg.pool())?;
    let y3 = conv_unit(ctx, &name(&b3), p, &b3.1)?;
    ctx.graph.concat(&[y0, y1, y2, y3], 4)
}

/// [`inception_block`] restricted to separable configs.
pub fn sep_inception_block<S: Scalar>(ctx: &mut BlockCtx<'_, S>, prefix: &str, x: Var, cfg: &InceptionConfig) -> Result<Var> {
    if cfg.kind != ConvKind::Sep {
        return Err(Error::invalid("sep inception block", format!("config kind is {}", cfg.kind.label())));
    }
    inception_block(ctx, prefix, x, cfg)
}

/// Gate weights as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> GateParams<S> {
    pub fn new(w: Tensor<S>, b: Tensor<S>) -> Result<Self> {
        let n = b.len();
        if w.shape() != [n, n] || b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "gate params",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self { w, b })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![n, n]),
            b: Tensor::zeros(vec![n]),
        }
    }

    /// `σ(W · mean_THW(x) + b) ⊙ x` without a graph.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let (xv, w, b) = (g.constant(x.clone()), g.constant(self.w.clone()), g.constant(self.b.clone()));
        let y = g.feature_gate(xv, w, b)?;
        Ok(g.value(y).clone())
    }
}

impl<S: Scalar> Graph<S> {
    /// Channel gate from the space-time mean: `σ(W · mean_THW(x) + b)`,
    /// shared by every position of a `(batch, channel)` pair.
    pub fn gate_values(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(w) != [c, c] || self.shape(b) != [c] {
            return Err(Error::invalid(
                "feature gate",
                format!("{c} channels need W [{c}, {c}] and b [{c}], got {:?} and {:?}", self.shape(w), self.shape(b)),
            ));
        }
        let pooled = self.avgpool_spacetime(x)?;
        let z = self.matvec(w, pooled, Some(b))?;
        Ok(self.sigmoid(z))
    }

    pub fn feature_gate(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let gate = self.gate_values(x, w, b)?;
        let [n, c] = [self.shape(gate)[0], self.shape(gate)[1]];
        let gate = self.reshape(gate, &[n, 1, 1, 1, c])?;
        self.mul(x, gate)
    }
}
