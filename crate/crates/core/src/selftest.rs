//! Randomized comparisons of the fast kernels against the naive oracles,
//! and finite-difference checks of every differentiable op and block.
//!
//! Oracle checks on integer or dyadic data must agree bit for bit; checks
//! on real-valued data must stay within the dot-product rounding bound
//! `(K + 2)·ε·Σ|x·w|` per output element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{BatchNormConfig, ConvKind, InceptionWidths};
use crate::autograd::Graph;
use crate::blocks::{
    conv_unit, inception_block, inception_buffers, inception_params, sep_inception_block, unit_buffers, unit_params, GateParams,
    InceptionConfig, Mode, UnitConfig,
};
use crate::error::Result;
use crate::gradcheck::{check_block_gradients, check_gradients, GradCheckOpts};
use crate::ops::{conv3d_forward, maxpool3d_forward, sepconv3d_forward, BnMode, ConvOpts, FilterBank, Padding, PoolOpts, RunningStats, TimeBorder};
use crate::oracle;
use crate::params::{ParamDecl, ParamStore};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    /// Largest observed error in the check's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

/// Relative gradient error allowed in the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn ints(shape: Vec<usize>, lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..=hi) as f64)
}

fn normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn bit_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| if x.to_bits() == y.to_bits() { 0.0 } else { (x - y).abs().max(f64::MIN_POSITIVE) }).fold(0.0, f64::max)
}

/// Largest `|fast − naive| / bound` over elements.
fn bound_ratio(fast: &Tensor<f64>, naive: &Tensor<f64>, abs_sum: &Tensor<f64>, taps: usize) -> f64 {
    let eps = f64::EPSILON;
    fast.data()
        .iter()
        .zip(naive.data())
        .zip(abs_sum.data())
        .map(|((f, n), a)| {
            let bound = (taps as f64 + 2.0) * eps * a;
            if bound == 0.0 {
                if f == n {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (f - n).abs() / bound
            }
        })
        .fold(0.0, f64::max)
}

struct ConvCase {
    x_shape: Vec<usize>,
    w_shape: Vec<usize>,
    opts: ConvOpts,
    bias: bool,
}

fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    let k = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
    let dims: Vec<usize> = (0..3)
        .map(|a| {
            let lo = if padding == Padding::Valid { k[a] } else { 1 };
            rng.random_range(lo..=lo + 4)
        })
        .collect();
    let stride = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
    let border = if rng.random_bool(0.5) { TimeBorder::Zero } else { TimeBorder::Replicate };
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    ConvCase {
        x_shape: vec![n, dims[0], dims[1], dims[2], cin],
        w_shape: vec![k[0], k[1], k[2], cin, cout],
        opts: ConvOpts::stride(stride).with_padding(padding).with_time_border(border),
        bias: rng.random_bool(0.5),
    }
}

fn abs(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(f64::abs)
}

/// Fast kernels against the naive oracles on `instances` random cases per
/// check.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // conv3d, integer data, plain and graph paths.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = conv_case(&mut rng);
        let x = ints(c.x_shape.clone(), -4, 4, &mut rng);
        let w = ints(c.w_shape.clone(), -3, 3, &mut rng);
        let b = c.bias.then(|| ints(vec![c.w_shape[4]], -5, 5, &mut rng));
        let naive = oracle::conv3d(&x, &w, b.as_ref(), &c.opts);
        worst = worst.max(bit_diff(&conv3d_forward(&x, &w, b.as_ref(), &c.opts)?, &naive));
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let bv = b.map(|b| g.constant(b));
        let y = g.conv3d(xv, wv, bv, &c.opts)?;
        worst = worst.max(bit_diff(g.value(y), &naive));
    }
    checks.push(Check::new("conv3d exact (integer data)", instances, worst, 0.0));

    // conv3d, real data, rounding bound.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = conv_case(&mut rng);
        let x = normal(c.x_shape.clone(), &mut rng);
        let w = normal(c.w_shape.clone(), &mut rng);
        let b = c.bias.then(|| normal(vec![c.w_shape[4]], &mut rng));
        let naive = oracle::conv3d(&x, &w, b.as_ref(), &c.opts);
        let abs_sum = oracle::conv3d(&abs(&x), &abs(&w), b.as_ref().map(abs).as_ref(), &c.opts);
        let taps = c.w_shape[..4].iter().product();
        worst = worst.max(bound_ratio(&conv3d_forward(&x, &w, b.as_ref(), &c.opts)?, &naive, &abs_sum, taps));
    }
    checks.push(Check::new("conv3d within rounding bound (real data)", instances, worst, 1.0));

    // sepconv3d: spatial bank then temporal bank against two naive passes.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = conv_case(&mut rng);
        let (cin, cout) = (c.w_shape[3], c.w_shape[4]);
        let cmid = rng.random_range(1..=3);
        let s_opts = ConvOpts::stride([1, c.opts.stride[1], c.opts.stride[2]]).with_padding(c.opts.padding);
        let t_opts = ConvOpts::stride([c.opts.stride[0], 1, 1])
            .with_padding(c.opts.padding)
            .with_time_border(c.opts.time_border);
        let x = ints(c.x_shape.clone(), -3, 3, &mut rng);
        let sw = ints(vec![1, c.w_shape[1], c.w_shape[2], cin, cmid], -2, 2, &mut rng);
        let tw = ints(vec![c.w_shape[0], 1, 1, cmid, cout], -2, 2, &mut rng);
        let tb = c.bias.then(|| ints(vec![cout], -3, 3, &mut rng));
        let naive = oracle::conv3d(&oracle::conv3d(&x, &sw, None, &s_opts), &tw, tb.as_ref(), &t_opts);
        let spatial = FilterBank::new(sw.clone(), None, s_opts)?;
        let temporal = FilterBank::new(tw.clone(), tb.clone(), t_opts)?;
        worst = worst.max(bit_diff(&sepconv3d_forward(&x, &spatial, &temporal)?, &naive));
        let mut g = Graph::new();
        let (xv, swv, twv) = (g.constant(x), g.constant(sw), g.constant(tw));
        let tbv = tb.map(|b| g.constant(b));
        let y = g.sepconv3d(xv, swv, None, &s_opts, twv, tbv, &t_opts)?;
        worst = worst.max(bit_diff(g.value(y), &naive));
    }
    checks.push(Check::new("sepconv3d exact (integer data)", instances, worst, 0.0));

    // maxpool3d on real data: selection is exact.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let window = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let stride = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let lo = |a: usize| if padding == Padding::Valid { window[a] } else { 1 };
        let shape = vec![
            rng.random_range(1..=2),
            rng.random_range(lo(0)..=lo(0) + 4),
            rng.random_range(lo(1)..=lo(1) + 4),
            rng.random_range(lo(2)..=lo(2) + 4),
            rng.random_range(1..=3),
        ];
        let opts = PoolOpts::new(window, stride).with_padding(padding);
        let x = normal(shape, &mut rng);
        let naive = oracle::maxpool3d(&x, &opts);
        worst = worst.max(bit_diff(&maxpool3d_forward(&x, &opts)?.0, &naive));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.maxpool3d(xv, &opts)?;
        worst = worst.max(bit_diff(g.value(y), &naive));
    }
    checks.push(Check::new("maxpool3d exact (real data)", instances, worst, 0.0));

    // Space-time average pooling.
    let mut worst: f64 = 0.0;
    let mut worst_real: f64 = 0.0;
    for _ in 0..instances {
        let shape = vec![
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=4),
        ];
        let x = ints(shape.clone(), -9, 9, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.avgpool_spacetime(xv)?;
        worst = worst.max(bit_diff(g.value(y), &oracle::avgpool_spacetime(&x)));
        let xr = normal(shape.clone(), &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(xr.clone());
        let y = g.avgpool_spacetime(xv)?;
        let count = shape[1] * shape[2] * shape[3];
        let abs_mean = oracle::avgpool_spacetime(&abs(&xr));
        worst_real = worst_real.max(bound_ratio(g.value(y), &oracle::avgpool_spacetime(&xr), &abs_mean, count));
    }
    checks.push(Check::new("avgpool exact (integer data)", instances, worst, 0.0));
    checks.push(Check::new("avgpool within rounding bound (real data)", instances, worst_real, 1.0));

    // Feature gating with power-of-two pooling extents, so every pooled
    // mean and matrix-vector product is exact.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let p2 = |rng: &mut ChaCha8Rng, max: u32| 1usize << rng.random_range(0..=max);
        let c = rng.random_range(1..=4);
        let shape = vec![rng.random_range(1..=2), p2(&mut rng, 1), p2(&mut rng, 2), p2(&mut rng, 2), c];
        let x = ints(shape, -4, 4, &mut rng);
        let gp = GateParams::new(ints(vec![c, c], -2, 2, &mut rng), ints(vec![c], -2, 2, &mut rng))?;
        let naive = oracle::feature_gate(&x, &gp.w, &gp.b);
        worst = worst.max(bit_diff(&gp.apply(&x)?, &naive));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(gp.w.clone()), g.constant(gp.b.clone()));
        let gv = g.gate_values(xv, wv, bv)?;
        worst = worst.max(bit_diff(g.value(gv), &oracle::gate_values(&x, &gp.w, &gp.b)));
    }
    checks.push(Check::new("feature gating exact (dyadic data)", instances, worst, 0.0));
    Ok(checks)
}

fn grad_check(name: &str, inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Graph<f64>, &[crate::autograd::Var]) -> Result<crate::autograd::Var>) -> Result<Check> {
    let opts = GradCheckOpts { seed, ..GradCheckOpts::default() };
    let r = check_gradients(inputs, opts, f)?;
    Ok(Check::new(name, 1, r.max_rel_err(), GRAD_TOLERANCE))
}

fn materialize(decls: &[ParamDecl], rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    for d in decls {
        store.insert(d.name.clone(), d.materialize(rng))?;
    }
    Ok(store)
}

/// Random parameters (gates and BN shifts included) for a unit or block.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        let scale = if t.shape().len() == 5 { 1.0 / (t.len() / t.shape()[4]) as f64 } else { 0.3 };
        *t = Tensor::randn(t.shape().to_vec(), scale.sqrt(), rng);
    }
}

/// Running statistics away from the identity so eval-mode BN is exercised.
fn random_buffers(decls: &[ParamDecl], rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    for d in decls {
        let t = if d.name.ends_with("_var") {
            Tensor::uniform(d.shape.clone(), 0.5, 2.0, rng)
        } else {
            Tensor::randn(d.shape.clone(), 0.3, rng)
        };
        store.insert(d.name.clone(), t)?;
    }
    Ok(store)
}

fn block_check(
    name: &str,
    x: &Tensor<f64>,
    params: &ParamStore<f64>,
    buffers: &ParamStore<f64>,
    bn: BatchNormConfig,
    mode: Mode,
    seed: u64,
    f: impl Fn(&mut crate::blocks::BlockCtx<'_, f64>, crate::autograd::Var) -> Result<crate::autograd::Var>,
) -> Result<Check> {
    let opts = GradCheckOpts {
        seed,
        max_coords: Some(24),
        ..GradCheckOpts::default()
    };
    let r = check_block_gradients(x, params, buffers, bn, mode, opts, f)?;
    Ok(Check::new(name, r.rel_err.len(), r.max_rel_err(), GRAD_TOLERANCE))
}

/// Central differences for every differentiable op, every unit kind and
/// the Inception blocks.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let a = normal(vec![2, 3, 4], &mut rng);
    let b = normal(vec![3, 1], &mut rng);
    checks.push(grad_check("add (broadcast)", &[a.clone(), b.clone()], 1, |g, v| g.add(v[0], v[1]))?);
    checks.push(grad_check("sub (broadcast)", &[a.clone(), b.clone()], 2, |g, v| g.sub(v[0], v[1]))?);
    checks.push(grad_check("mul (broadcast)", &[a.clone(), b], 3, |g, v| g.mul(v[0], v[1]))?);
    checks.push(grad_check("mul_scalar", std::slice::from_ref(&a), 4, |g, v| Ok(g.mul_scalar(v[0], -1.5)))?);
    checks.push(grad_check("sum", std::slice::from_ref(&a), 5, |g, v| Ok(g.sum(v[0])))?);
    checks.push(grad_check("mean", std::slice::from_ref(&a), 6, |g, v| Ok(g.mean(v[0])))?);
    checks.push(grad_check("reshape", std::slice::from_ref(&a), 7, |g, v| g.reshape(v[0], &[6, 4]))?);
    checks.push(grad_check("reduce_mean", std::slice::from_ref(&a), 8, |g, v| g.reduce_mean(v[0], &[0, 2]))?);
    checks.push(grad_check("relu", std::slice::from_ref(&a), 9, |g, v| Ok(g.relu(v[0])))?);
    checks.push(grad_check("sigmoid", std::slice::from_ref(&a), 10, |g, v| Ok(g.sigmoid(v[0])))?);
    checks.push(grad_check("softmax", std::slice::from_ref(&a), 11, |g, v| g.softmax(v[0]))?);
    let parts = [normal(vec![2, 3, 2], &mut rng), normal(vec![2, 1, 2], &mut rng)];
    checks.push(grad_check("concat", &parts, 12, |g, v| g.concat(&[v[0], v[1]], 1))?);
    let mv = [normal(vec![4, 3], &mut rng), normal(vec![2, 3], &mut rng), normal(vec![4], &mut rng)];
    checks.push(grad_check("matvec", &mv, 13, |g, v| g.matvec(v[0], v[1], Some(v[2])))?);
    checks.push(grad_check("cross_entropy", &[normal(vec![3, 4], &mut rng)], 14, |g, v| g.cross_entropy(v[0], &[0, 3, 1]))?);
    checks.push(grad_check("dropout (fixed mask)", &[a], 15, |g, v| {
        g.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(99))
    })?);

    let conv_variants = [
        ("conv3d same/replicate", ConvOpts::stride([1, 1, 1]).with_time_border(TimeBorder::Replicate)),
        ("conv3d same/zero strided", ConvOpts::stride([2, 2, 1]).with_time_border(TimeBorder::Zero)),
        ("conv3d valid strided", ConvOpts::stride([1, 2, 2]).with_padding(Padding::Valid)),
    ];
    for (i, (name, opts)) in conv_variants.into_iter().enumerate() {
        let inputs = [normal(vec![2, 4, 5, 5, 2], &mut rng), normal(vec![3, 3, 3, 2, 3], &mut rng), normal(vec![3], &mut rng)];
        checks.push(grad_check(name, &inputs, 20 + i as u64, |g, v| g.conv3d(v[0], v[1], Some(v[2]), &opts))?);
    }
    let sep = [
        normal(vec![1, 4, 5, 5, 2], &mut rng),
        normal(vec![1, 3, 3, 2, 3], &mut rng),
        normal(vec![3, 1, 1, 3, 2], &mut rng),
        normal(vec![2], &mut rng),
    ];
    checks.push(grad_check("sepconv3d", &sep, 30, |g, v| {
        g.sepconv3d(v[0], v[1], None, &ConvOpts::stride([1, 2, 2]), v[2], Some(v[3]), &ConvOpts::stride([2, 1, 1]))
    })?);
    for (i, (window, stride)) in [([2, 2, 2], [2, 2, 2]), ([3, 3, 3], [1, 2, 2]), ([1, 3, 3], [1, 1, 1])].into_iter().enumerate() {
        let x = normal(vec![2, 4, 5, 5, 2], &mut rng);
        checks.push(grad_check(&format!("maxpool3d {window:?}/{stride:?}"), &[x], 40 + i as u64, |g, v| {
            g.maxpool3d(v[0], &PoolOpts::new(window, stride))
        })?);
    }
    checks.push(grad_check("avgpool_spacetime", &[normal(vec![2, 3, 4, 4, 3], &mut rng)], 50, |g, v| g.avgpool_spacetime(v[0]))?);
    let bn_in = [normal(vec![2, 3, 3, 3, 4], &mut rng), normal(vec![4], &mut rng), normal(vec![4], &mut rng)];
    checks.push(grad_check("batchnorm (train)", &bn_in, 51, |g, v| Ok(g.batchnorm(v[0], Some(v[1]), Some(v[2]), BnMode::Train)?.0))?);
    let run = RunningStats {
        mean: normal(vec![4], &mut rng),
        var: Tensor::uniform(vec![4], 0.5, 2.0, &mut rng),
    };
    checks.push(grad_check("batchnorm (eval)", &bn_in, 52, |g, v| Ok(g.batchnorm(v[0], Some(v[1]), Some(v[2]), BnMode::Eval(&run))?.0))?);
    let gate_in = [normal(vec![2, 3, 4, 4, 3], &mut rng), normal(vec![3, 3], &mut rng), normal(vec![3], &mut rng)];
    checks.push(grad_check("gate_values", &gate_in, 53, |g, v| g.gate_values(v[0], v[1], v[2]))?);
    checks.push(grad_check("feature_gate", &gate_in, 54, |g, v| g.feature_gate(v[0], v[1], v[2]))?);

    // Units of every kind with BN in both modes and without BN.
    let with_bn = BatchNormConfig { enabled: true, scale: true };
    let no_bn = BatchNormConfig { enabled: false, scale: false };
    let units = [
        ("unit 2d, BN train", UnitConfig::new(ConvKind::Conv2d, [3, 3, 3], 3, 4), with_bn, Mode::Train),
        ("unit 3d strided, bias", UnitConfig::new(ConvKind::Conv3d, [3, 3, 3], 3, 4).with_stride([2, 2, 2]), no_bn, Mode::Train),
        ("unit sep, BN eval", UnitConfig::new(ConvKind::Sep, [3, 3, 3], 3, 4), with_bn, Mode::Eval),
        ("unit sep gated, BN train", UnitConfig::new(ConvKind::Sep, [3, 3, 3], 3, 4).with_gate(true), with_bn, Mode::Train),
    ];
    for (i, (name, cfg, bn, mode)) in units.into_iter().enumerate() {
        let (mut pd, mut bd) = (Vec::new(), Vec::new());
        unit_params("u", &cfg, &bn, &mut pd);
        unit_buffers("u", &cfg, &bn, &mut bd);
        let mut params = materialize(&pd, &mut rng)?;
        randomize(&mut params, &mut rng);
        let buffers = random_buffers(&bd, &mut rng)?;
        let x = normal(vec![2, 4, 6, 6, 3], &mut rng);
        checks.push(block_check(name, &x, &params, &buffers, bn, mode, 60 + i as u64, |ctx, xv| conv_unit(ctx, "u", xv, &cfg))?);
    }

    let small = InceptionWidths::new(2, 2, 3, 2, 2, 2);
    let blocks = [
        ("inception 3d", InceptionConfig::new(4, small, ConvKind::Conv3d), vec![1, 4, 5, 5, 4]),
        ("inception 2d", InceptionConfig::new(4, small, ConvKind::Conv2d), vec![1, 4, 5, 5, 4]),
        (
            "sep inception (1x4x6x6x16)",
            InceptionConfig::new(16, InceptionWidths::new(4, 3, 4, 2, 3, 3), ConvKind::Sep),
            vec![1, 4, 6, 6, 16],
        ),
        (
            "gated sep inception (1x4x8x8x4)",
            InceptionConfig {
                gated: true,
                ..InceptionConfig::new(4, small, ConvKind::Sep)
            },
            vec![1, 4, 8, 8, 4],
        ),
    ];
    for (i, (name, cfg, shape)) in blocks.into_iter().enumerate() {
        let (mut pd, mut bd) = (Vec::new(), Vec::new());
        inception_params("m", &cfg, &with_bn, &mut pd);
        inception_buffers("m", &cfg, &with_bn, &mut bd);
        let mut params = materialize(&pd, &mut rng)?;
        randomize(&mut params, &mut rng);
        let buffers = random_buffers(&bd, &mut rng)?;
        let x = normal(shape, &mut rng);
        let sep = cfg.kind == ConvKind::Sep;
        checks.push(block_check(name, &x, &params, &buffers, with_bn, Mode::Train, 70 + i as u64, |ctx, xv| {
            if sep {
                sep_inception_block(ctx, "m", xv, &cfg)
            } else {
                inception_block(ctx, "m", xv, &cfg)
            }
        })?);
    }
    Ok(checks)
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_passes() {
        let checks = oracle_suite(10, 3).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }
}
