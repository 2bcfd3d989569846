//! Synchronous data-parallel training loop.
//!
//! Each step draws a batch from a seeded shuffle, splits it into
//! contiguous shards (one per worker), computes shard gradients on
//! separate threads and merges them in shard order, weighted by shard
//! size. Batch-norm statistics are per shard and merged the same way.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::network::{ForwardOpts, Network};
use crate::ops::BatchStats;
use crate::tensor::{Scalar, Tensor};
use crate::train::eval::{evaluate, EvalReport, EVAL_POLICY};
use crate::train::schedule::LrSchedule;
use crate::train::sgd::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Evaluate on the training set every this many steps; 0 only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Head dropout during training.
    #[serde(default = "yes")]
    pub dropout: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// 800 steps of batch 16, momentum 0.9, schedule 0.1 / 0.01 / 0.001.
    pub fn desk_scale(dataset: DatasetSpec) -> Self {
        Self {
            schedule: LrSchedule::desk_scale(800),
            momentum: 0.9,
            batch_size: 16,
            steps: 800,
            seed: 0,
            dataset,
            eval_every: 0,
            dropout: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        self.dataset.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    /// `(step, report)` on the training set.
    pub evals: Vec<(usize, EvalReport)>,
}

/// Mean loss, gradients in store order and batch-norm statistics of one
/// batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<S> {
    pub loss: f64,
    pub grads: Vec<Tensor<S>>,
    pub bn_stats: Vec<(String, BatchStats<S>)>,
}

/// Forward and backward on one batch. `step` only labels a non-finite
/// loss error.
pub fn batch_gradients<S: Scalar>(
    net: &Network<S>,
    x: &Tensor<S>,
    labels: &[usize],
    opts: ForwardOpts,
    step: usize,
) -> Result<BatchGradients<S>> {
    let mut pass = net.forward(x, opts)?;
    if let Some(layer) = pass.first_non_finite() {
        return Err(Error::NonFinite {
            step,
            layer: layer.to_string(),
        });
    }
    let (loss, grads) = pass.loss_and_grads(labels, net.params())?;
    let loss = loss.as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { step, layer: "loss".into() });
    }
    Ok(BatchGradients {
        loss,
        grads,
        bn_stats: pass.into_bn_stats(),
    })
}

/// Splits `n` items into `parts` contiguous ranges whose sizes differ by
/// at most one.
pub fn shard_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let (q, r) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = q + usize::from(i < r);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Data-parallel [`batch_gradients`]: shard results are merged in shard
/// order with weights `shard_len / batch_len`.
pub fn parallel_gradients<S: Scalar>(
    net: &Network<S>,
    data: &Dataset<S>,
    indices: &[usize],
    workers: usize,
    opts: impl Fn(usize) -> ForwardOpts + Sync,
    step: usize,
) -> Result<BatchGradients<S>> {
    let shards = shard_ranges(indices.len(), workers);
    let run = |(i, r): (usize, &std::ops::Range<usize>)| {
        let (x, y) = data.batch(&indices[r.clone()]);
        batch_gradients(net, &x, &y, opts(i), step)
    };
    let results: Vec<Result<BatchGradients<S>>> = if shards.len() == 1 {
        vec![run((0, &shards[0]))]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = shards.iter().enumerate().map(|job| scope.spawn(move || run(job))).collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        })
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    if results.len() == 1 {
        return Ok(results.into_iter().next().expect("one shard"));
    }
    let total = indices.len() as f64;
    let mut merged: Option<BatchGradients<S>> = None;
    for (res, range) in results.into_iter().zip(&shards) {
        let w = range.len() as f64 / total;
        let ws = S::lit(w);
        match merged.as_mut() {
            None => {
                merged = Some(BatchGradients {
                    loss: res.loss * w,
                    grads: res.grads.iter().map(|g| g.scale(ws)).collect(),
                    bn_stats: res
                        .bn_stats
                        .iter()
                        .map(|(k, s)| (k.clone(), BatchStats { mean: s.mean.scale(ws), var: s.var.scale(ws) }))
                        .collect(),
                })
            }
            Some(m) => {
                m.loss += res.loss * w;
                for (acc, g) in m.grads.iter_mut().zip(&res.grads) {
                    acc.add_assign(&g.scale(ws));
                }
                for ((_, acc), (_, s)) in m.bn_stats.iter_mut().zip(&res.bn_stats) {
                    acc.mean.add_assign(&s.mean.scale(ws));
                    acc.var.add_assign(&s.var.scale(ws));
                }
            }
        }
    }
    Ok(merged.expect("at least one shard"))
}

fn step_seed(seed: u64, step: usize, shard: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((step as u64) << 8)
        .wrapping_add(shard as u64)
}

/// Trains `net` in place and writes one `key=value` line per step and per
/// evaluation to `log`.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    workers: usize,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if data.classes() != net.spec().classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network has {}",
            data.classes(),
            net.spec().classes
        )));
    }
    writeln!(
        log,
        "# train_log v1 steps={} batch_size={} momentum={} seed={} workers={} eval_policy=\"{}\"",
        cfg.steps, cfg.batch_size, cfg.momentum, cfg.seed, workers, EVAL_POLICY
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut sgd = Sgd::new(net.params(), cfg.momentum);
    let mut outcome = TrainOutcome {
        steps: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let dropout = cfg.dropout;
        let g = parallel_gradients(
            net,
            data,
            &batch,
            workers,
            |shard| ForwardOpts::train(dropout.then(|| step_seed(cfg.seed, step, shard))),
            step,
        )?;
        let lr = cfg.schedule.lr(step);
        sgd.step(net.params_mut(), &g.grads, lr)?;
        net.update_running_stats(&g.bn_stats)?;
        writeln!(log, "step={step} lr={lr} loss={:.6}", g.loss)?;
        outcome.steps.push(StepRecord { step, lr, loss: g.loss });
        let last = step + 1 == cfg.steps;
        if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            let r = evaluate(net, data, workers)?;
            writeln!(log, "eval step={} split=train top1={:.4} top5={:.4}", step + 1, r.top1, r.top5)?;
            outcome.evals.push((step + 1, r));
        }
    }
    Ok(outcome)
}
